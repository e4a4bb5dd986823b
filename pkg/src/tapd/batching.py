"""Batched, frame-normalized views of scenes for training and evaluation.

Scenes within one batch must agree on (N agents, P polylines, S segments,
A agents of interest); group_by_shape buckets an arbitrary scene list into
such sub-batches. Grouping only affects how work is stacked, never which
scenes contribute to a loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frames import SceneFrame, aoi_targets
from .scenegen import Scene


@dataclass
class SceneBatch:
    x_obs: np.ndarray  # (B, N, T_obs, C_a), scene frame
    map_feats: np.ndarray  # (B, P, S, C_m), scene frame
    aoi_onehot: np.ndarray  # (B, A, N) row-gather matrices
    targets: np.ndarray  # (B, A, T_f, 2), per-AOI frame
    scenes: list

    @property
    def size(self) -> int:
        return self.x_obs.shape[0]

    @classmethod
    def from_scenes(cls, scenes, t_obs: int) -> "SceneBatch":
        xs, maps, onehots, targets = [], [], [], []
        for scene in scenes:
            frame = SceneFrame.from_scene(scene, t_obs)
            states = frame.states(scene.states()[:, :t_obs])
            xs.append(states)
            maps.append(frame.map_features(scene.map.polylines))
            n = scene.n_agents
            oh = np.zeros((len(scene.aoi_indices), n))
            for row, idx in enumerate(scene.aoi_indices):
                oh[row, idx] = 1.0
            onehots.append(oh)
            targets.append(aoi_targets(scene, frame, t_obs))
        return cls(
            x_obs=np.stack(xs),
            map_feats=np.stack(maps),
            aoi_onehot=np.stack(onehots),
            targets=np.stack(targets),
            scenes=list(scenes),
        )

    def truncated(self, t_tau: int) -> np.ndarray:
        """Trailing t_tau observed steps, fixed end time."""
        return self.x_obs[:, :, self.x_obs.shape[2] - t_tau :]

    def prefix(self, t_tau: int) -> np.ndarray:
        """The unobserved leading steps a tau-length view is missing."""
        return self.x_obs[:, :, : self.x_obs.shape[2] - t_tau]


def shape_signature(scene: Scene) -> tuple:
    return (
        scene.n_agents,
        scene.map.polylines.shape[0],
        scene.map.polylines.shape[1],
        len(scene.aoi_indices),
    )


def group_by_shape(scenes) -> list:
    """Bucket scenes by shape signature, preserving first-seen order."""
    groups: dict = {}
    for scene in scenes:
        groups.setdefault(shape_signature(scene), []).append(scene)
    return list(groups.values())
