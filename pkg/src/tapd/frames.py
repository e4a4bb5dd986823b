"""Agent-centric coordinate frames.

Both models consume scenes translated and rotated into the frame of the
primary agent of interest at the last observed step: that agent's position
becomes the origin and its heading the +x axis. The last observed step is the
same absolute time for every observation length, so the frame is independent
of how much history was kept.

Prediction targets are additionally re-centered per AOI (each AOI's own last
observed position subtracted) so decoded displacement offsets always start
near the origin. Rigid transforms preserve distances, so metrics computed in
these frames are meters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenegen import Scene


@dataclass(frozen=True)
class SceneFrame:
    origin: np.ndarray  # (2,)
    rot: np.ndarray  # (2, 2), applied as row-vector @ rot

    @classmethod
    def from_scene(cls, scene: Scene, t_obs: int) -> "SceneFrame":
        anchor = scene.agents[scene.aoi_indices[0]].states[t_obs - 1]
        c, s = anchor[4], anchor[5]
        # rotation by -heading: maps the anchor heading onto (1, 0)
        rot = np.array([[c, -s], [s, c]])
        return cls(origin=anchor[0:2].copy(), rot=rot)

    def points(self, xy: np.ndarray) -> np.ndarray:
        return (xy - self.origin) @ self.rot

    def vectors(self, v: np.ndarray) -> np.ndarray:
        return v @ self.rot

    def states(self, states: np.ndarray) -> np.ndarray:
        """Transform (..., C_A) agent states into the frame."""
        out = states.copy()
        out[..., 0:2] = self.points(states[..., 0:2])
        out[..., 2:4] = self.vectors(states[..., 2:4])
        out[..., 4:6] = self.vectors(states[..., 4:6])
        return out

    def map_features(self, polys: np.ndarray) -> np.ndarray:
        """Transform (..., C_M) polyline segments into the frame."""
        out = polys.copy()
        out[..., 0:2] = self.points(polys[..., 0:2])
        out[..., 2:4] = self.vectors(polys[..., 2:4])
        return out

    def inverse_points(self, xy: np.ndarray) -> np.ndarray:
        return xy @ self.rot.T + self.origin


def aoi_targets(scene: Scene, frame: SceneFrame, t_obs: int) -> np.ndarray:
    """Per-AOI future targets (A, T_f, 2): rotated into the scene frame and
    re-centered on each AOI's own last observed position."""
    states = scene.states()
    futures = states[:, t_obs:, 0:2]
    rows = []
    for a in scene.aoi_indices:
        last = states[a, t_obs - 1, 0:2]
        rows.append((futures[a] - last) @ frame.rot)
    return np.stack(rows)
