"""Synthetic vectorized driving scenes: generation, truncation, serialization.

A scene is a small map of connected polyline segments plus a handful of agent
tracks rolled out from simple kinematic behavior models (constant velocity,
constant turn, lane following, stop-and-go) with Gaussian velocity noise.
Scenes live in world coordinates; agent-centric normalization happens in the
models so one stored scene serves every observation length.

The on-disk dataset format ("TAPD" v1) is little-endian with float64
payloads: a fixed global header carrying the time-grid constants, then
length-prefixed scene records, each protected by CRC32.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

AGENT_KINDS = ("constant-velocity", "constant-turn", "lane-follow", "stop-and-go")
_KIND_CODE = {k: i for i, k in enumerate(AGENT_KINDS)}

C_A = 6  # x, y, vx, vy, cos(heading), sin(heading)
C_M = 5  # segment start x, y, direction dx, dy, lane-type flag

SCENE_RADIUS = 150.0


class DatasetError(Exception):
    """Malformed, corrupted, or incompatible dataset file."""


@dataclass(frozen=True)
class GenConfig:
    """Scene generator parameters; a deterministic function of (seed, config)."""

    n_agents: int = 4
    n_polylines: int = 3
    segments_per_polyline: int = 10
    segment_length: float = 6.0
    n_aoi: int = 1
    delta_t: int = 5
    h: int = 4
    t_f: int = 30
    behavior_weights: tuple = (("lane-follow", 0.4), ("constant-velocity", 0.3),
                               ("constant-turn", 0.2), ("stop-and-go", 0.1))
    speed_range: tuple = (0.3, 1.2)  # meters per step
    turn_rate_range: tuple = (0.02, 0.08)  # radians per step
    sigma_v: float = 0.01  # velocity noise std, meters per step
    v_max: float = 1.5

    @property
    def t_obs(self) -> int:
        return self.h * self.delta_t

    @property
    def t_total(self) -> int:
        return self.t_obs + self.t_f

    def validate(self) -> None:
        if not 2 <= self.n_agents <= 8:
            raise ValueError(f"n_agents must be in [2, 8], got {self.n_agents}")
        if not 2 <= self.n_polylines <= 6:
            raise ValueError(f"n_polylines must be in [2, 6], got {self.n_polylines}")
        if not 1 <= self.n_aoi <= self.n_agents:
            raise ValueError(f"n_aoi must be in [1, {self.n_agents}]")
        if self.sigma_v < 0:
            raise ValueError(f"sigma_v must be non-negative, got {self.sigma_v}")
        if self.delta_t < 1 or self.h < 1 or self.t_f < 1:
            raise ValueError("delta_t, h, and t_f must all be >= 1")
        if self.segments_per_polyline < 2:
            raise ValueError("segments_per_polyline must be >= 2")
        names = [k for k, _ in self.behavior_weights]
        if set(names) - set(AGENT_KINDS) or any(w < 0 for _, w in self.behavior_weights):
            raise ValueError(f"bad behavior weights {self.behavior_weights}")
        if sum(w for _, w in self.behavior_weights) <= 0:
            raise ValueError("behavior weights must not all be zero")
        if self.speed_range[1] + 5.0 * self.sigma_v * 1.5 > self.v_max:
            raise ValueError("speed_range plus noise can exceed v_max")


@dataclass
class MapPolylines:
    """P polylines of S connected segments with C_M features each."""

    polylines: np.ndarray  # (P, S, C_M)

    @property
    def n_polylines(self) -> int:
        return self.polylines.shape[0]

    def segment_count(self) -> int:
        return self.polylines.shape[0] * self.polylines.shape[1]


@dataclass
class AgentTrack:
    states: np.ndarray  # (t_obs + t_f, C_A)
    kind: str
    is_aoi: bool


@dataclass
class Scene:
    map: MapPolylines
    agents: list
    aoi_indices: list
    scene_id: int
    seed: int

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def states(self) -> np.ndarray:
        """All agent states stacked to (N, T_total, C_A)."""
        return np.stack([a.states for a in self.agents])

    def future_positions(self, t_obs: int) -> np.ndarray:
        """Ground-truth future xy for every agent, (N, T_f, 2)."""
        return self.states()[:, t_obs:, 0:2].copy()


@dataclass(frozen=True)
class TruncationSpec:
    """Fixed-end-time truncation: keep the last tau * delta_t observed steps."""

    delta_t: int
    h: int
    tau: int

    def __post_init__(self):
        if self.delta_t < 1 or self.h < 1:
            raise ValueError("delta_t and h must be >= 1")
        if not 1 <= self.tau <= self.h:
            raise ValueError(f"tau must be in [1, {self.h}], got {self.tau}")

    @property
    def t_obs(self) -> int:
        return self.h * self.delta_t

    @property
    def t_tau(self) -> int:
        return self.tau * self.delta_t


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _random_polyline(rng, cfg: GenConfig, centerline: bool) -> np.ndarray:
    s = cfg.segments_per_polyline
    start = rng.uniform(-40.0, 40.0, size=2)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    if rng.uniform() < 0.5:
        curvature = 0.0
    else:
        curvature = rng.choice([-1.0, 1.0]) * rng.uniform(0.005, 0.03)
    points = np.empty((s + 1, 2))
    points[0] = start
    for i in range(s):
        points[i + 1] = points[i] + cfg.segment_length * np.array(
            [np.cos(heading), np.sin(heading)]
        )
        heading += curvature * cfg.segment_length
    seg = np.empty((s, C_M))
    seg[:, 0:2] = points[:-1]
    seg[:, 2:4] = points[1:] - points[:-1]
    seg[:, 4] = 1.0 if centerline else 0.0
    return seg


def _polyline_points(poly: np.ndarray) -> np.ndarray:
    """Recover the S+1 vertex chain of one polyline."""
    pts = np.vstack([poly[:, 0:2], poly[-1:, 0:2] + poly[-1:, 2:4]])
    return pts


def _arc_position(points: np.ndarray, arc: float) -> np.ndarray:
    """Point at arc-length `arc` along the chain, extended past the end."""
    seg_vec = np.diff(points, axis=0)
    seg_len = np.linalg.norm(seg_vec, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    if arc >= cum[-1]:
        direction = seg_vec[-1] / seg_len[-1]
        return points[-1] + (arc - cum[-1]) * direction
    i = int(np.searchsorted(cum, arc, side="right") - 1)
    frac = (arc - cum[i]) / seg_len[i]
    return points[i] + frac * seg_vec[i]


def _model_velocities(rng, cfg: GenConfig, kind: str, t_total: int, centerlines: list):
    """Noise-free per-step velocities and the start position for one agent."""
    speed = rng.uniform(*cfg.speed_range)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    if kind == "constant-velocity":
        start = rng.uniform(-30.0, 30.0, size=2)
        v = np.tile(speed * np.array([np.cos(theta), np.sin(theta)]), (t_total, 1))
    elif kind == "constant-turn":
        start = rng.uniform(-30.0, 30.0, size=2)
        omega = rng.choice([-1.0, 1.0]) * rng.uniform(*cfg.turn_rate_range)
        angles = theta + omega * np.arange(t_total)
        v = speed * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    elif kind == "lane-follow":
        lane = centerlines[int(rng.integers(len(centerlines)))]
        points = _polyline_points(lane)
        total_len = float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())
        arc0 = rng.uniform(0.0, 0.4 * total_len)
        arcs = arc0 + speed * np.arange(t_total + 1)
        path = np.stack([_arc_position(points, a) for a in arcs])
        start = path[0]
        v = np.diff(path, axis=0)
    elif kind == "stop-and-go":
        start = rng.uniform(-30.0, 30.0, size=2)
        ramp = 5
        t_stop = int(rng.integers(5, max(6, t_total // 2)))
        hold = int(rng.integers(5, 15))
        profile = np.ones(t_total)
        for t in range(t_total):
            if t < t_stop:
                profile[t] = 1.0
            elif t < t_stop + ramp:
                profile[t] = 1.0 - (t - t_stop + 1) / ramp
            elif t < t_stop + ramp + hold:
                profile[t] = 0.0
            elif t < t_stop + 2 * ramp + hold:
                profile[t] = (t - t_stop - ramp - hold + 1) / ramp
        profile = np.clip(profile, 0.0, 1.0)
        v = (speed * profile)[:, None] * np.array([np.cos(theta), np.sin(theta)])
    else:
        raise ValueError(f"unknown behavior kind {kind!r}")
    return start, v


def _rollout(rng, cfg: GenConfig, kind: str, t_total: int, centerlines: list) -> np.ndarray:
    start, v = _model_velocities(rng, cfg, kind, t_total, centerlines)
    if cfg.sigma_v > 0:
        noise = rng.normal(0.0, cfg.sigma_v, size=v.shape)
        np.clip(noise, -5.0 * cfg.sigma_v, 5.0 * cfg.sigma_v, out=noise)
        v = v + noise
    states = np.empty((t_total, C_A))
    pos = start.copy()
    heading = None
    for t in range(t_total):
        states[t, 0:2] = pos
        states[t, 2:4] = v[t]
        speed = float(np.hypot(v[t, 0], v[t, 1]))
        if speed > 1e-9:
            heading = v[t] / speed
        elif heading is None:
            heading = np.array([1.0, 0.0])
        states[t, 4:6] = heading
        pos = pos + v[t]
    return states


def generate_scene(seed: int, config: GenConfig, scene_id: int | None = None) -> Scene:
    """Deterministic scene for (seed, config): map polylines plus agent tracks."""
    config.validate()
    rng = np.random.default_rng(seed)
    polys = []
    for p in range(config.n_polylines):
        centerline = True if p == 0 else bool(rng.uniform() < 0.7)
        polys.append(_random_polyline(rng, config, centerline))
    poly_arr = np.stack(polys)
    centerlines = [poly for poly in polys if poly[0, 4] == 1.0]

    names = [k for k, _ in config.behavior_weights]
    weights = np.array([w for _, w in config.behavior_weights], dtype=np.float64)
    weights = weights / weights.sum()
    kinds = [names[int(i)] for i in rng.choice(len(names), size=config.n_agents, p=weights)]
    aoi = sorted(int(i) for i in rng.choice(config.n_agents, size=config.n_aoi, replace=False))

    agents = []
    for i, kind in enumerate(kinds):
        states = _rollout(rng, config, kind, config.t_total, centerlines)
        agents.append(AgentTrack(states=states, kind=kind, is_aoi=i in aoi))
    scene = Scene(
        map=MapPolylines(poly_arr),
        agents=agents,
        aoi_indices=aoi,
        scene_id=seed if scene_id is None else scene_id,
        seed=seed,
    )
    validate_scene(scene, config)
    return scene


def validate_scene(scene: Scene, config: GenConfig | None = None) -> None:
    """Assert the structural and kinematic invariants of a generated scene."""
    n = scene.n_agents
    if not 1 <= len(scene.aoi_indices) <= n:
        raise ValueError("scene must have between 1 and N agents of interest")
    if any(not 0 <= i < n for i in scene.aoi_indices):
        raise ValueError(f"aoi indices {scene.aoi_indices} out of range for {n} agents")
    polys = scene.map.polylines
    if not np.all(np.isfinite(polys)):
        raise ValueError("map contains non-finite values")
    ends = polys[:, :-1, 0:2] + polys[:, :-1, 2:4]
    if not np.allclose(ends, polys[:, 1:, 0:2], atol=1e-9):
        raise ValueError("polyline segments are not connected")
    if np.abs(polys[:, :, 0:2]).max() > SCENE_RADIUS:
        raise ValueError("map extends beyond the scene radius")
    t_expected = None if config is None else config.t_total
    for a in scene.agents:
        if t_expected is not None and a.states.shape[0] != t_expected:
            raise ValueError(
                f"agent has {a.states.shape[0]} steps, expected {t_expected}"
            )
        if not np.all(np.isfinite(a.states)):
            raise ValueError("agent states contain non-finite values")
        norms = np.linalg.norm(a.states[:, 4:6], axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("heading vectors are not unit norm")
        if np.abs(a.states[:, 0:2]).max() > SCENE_RADIUS:
            raise ValueError("agent leaves the scene radius")
        step = a.states[1:, 0:2] - a.states[:-1, 0:2]
        if not np.allclose(step, a.states[:-1, 2:4], atol=1e-9):
            raise ValueError("velocities inconsistent with positional differences")
        if config is not None:
            if np.linalg.norm(step, axis=1).max() > config.v_max:
                raise ValueError("per-step displacement exceeds v_max")


# ---------------------------------------------------------------------------
# truncation
# ---------------------------------------------------------------------------


def truncate_history(scene: Scene, spec: TruncationSpec) -> np.ndarray:
    """Observed tensor for tau intervals: the trailing t_tau steps of the window.

    The observation end time is fixed: for every tau the returned rows are
    steps [t_obs - t_tau, t_obs) of the full history.
    """
    states = scene.states()
    if states.shape[1] < spec.t_obs:
        raise ValueError(
            f"scene has {states.shape[1]} steps, needs at least t_obs={spec.t_obs}"
        )
    window = states[:, : spec.t_obs]
    return window[:, spec.t_obs - spec.t_tau :].copy()


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

MAGIC = b"TAPD"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sHBBHHHHHQ")
_RECORD_FIXED = struct.Struct("<qQHHHH")


@dataclass(frozen=True)
class DatasetHeader:
    delta_t: int
    h: int
    t_f: int
    c_a: int = C_A
    c_m: int = C_M
    reconstructed: bool = False

    @property
    def t_obs(self) -> int:
        return self.h * self.delta_t

    @property
    def t_total(self) -> int:
        return self.t_obs + self.t_f

    @classmethod
    def from_config(cls, config: GenConfig, reconstructed: bool = False) -> "DatasetHeader":
        return cls(delta_t=config.delta_t, h=config.h, t_f=config.t_f,
                   reconstructed=reconstructed)


def _encode_scene(scene: Scene, header: DatasetHeader) -> bytes:
    states = scene.states()
    n, t_total, c_a = states.shape
    if t_total != header.t_total or c_a != header.c_a:
        raise DatasetError(
            f"scene {scene.scene_id}: states {states.shape} do not match header "
            f"(t_total={header.t_total}, c_a={header.c_a})"
        )
    polys = scene.map.polylines
    if polys.shape[2] != header.c_m:
        raise DatasetError(f"scene {scene.scene_id}: map feature dim {polys.shape[2]} != {header.c_m}")
    parts = [
        _RECORD_FIXED.pack(
            scene.scene_id, scene.seed, n, len(scene.aoi_indices),
            polys.shape[0], polys.shape[1],
        ),
        np.asarray(scene.aoi_indices, dtype="<u2").tobytes(),
        np.array([_KIND_CODE[a.kind] for a in scene.agents], dtype="<u1").tobytes(),
        np.array([1 if a.is_aoi else 0 for a in scene.agents], dtype="<u1").tobytes(),
        np.ascontiguousarray(polys, dtype="<f8").tobytes(),
        np.ascontiguousarray(states, dtype="<f8").tobytes(),
    ]
    return b"".join(parts)


def _decode_scene(payload: bytes, header: DatasetHeader, index: int) -> Scene:
    try:
        scene_id, seed, n, n_aoi, p, s_m = _RECORD_FIXED.unpack_from(payload, 0)
        off = _RECORD_FIXED.size
        aoi = np.frombuffer(payload, dtype="<u2", count=n_aoi, offset=off)
        off += 2 * n_aoi
        kinds = np.frombuffer(payload, dtype="<u1", count=n, offset=off)
        off += n
        flags = np.frombuffer(payload, dtype="<u1", count=n, offset=off)
        off += n
        map_count = p * s_m * header.c_m
        polys = np.frombuffer(payload, dtype="<f8", count=map_count, offset=off)
        off += 8 * map_count
        state_count = n * header.t_total * header.c_a
        states = np.frombuffer(payload, dtype="<f8", count=state_count, offset=off)
        off += 8 * state_count
    except (struct.error, ValueError) as exc:
        raise DatasetError(f"record {index}: truncated payload") from exc
    if off != len(payload):
        raise DatasetError(f"record {index}: payload length mismatch")
    polys = polys.reshape(p, s_m, header.c_m).copy()
    states = states.reshape(n, header.t_total, header.c_a)
    agents = [
        AgentTrack(states=states[i].copy(), kind=AGENT_KINDS[kinds[i]], is_aoi=bool(flags[i]))
        for i in range(n)
    ]
    return Scene(
        map=MapPolylines(polys),
        agents=agents,
        aoi_indices=[int(i) for i in aoi],
        scene_id=scene_id,
        seed=seed,
    )


def write_dataset(scenes, path, header: DatasetHeader) -> None:
    """Write scenes in TAPD v1 format; the round trip is bit-exact."""
    records = [_encode_scene(s, header) for s in scenes]
    flags = 1 if header.reconstructed else 0
    with open(path, "wb") as f:
        f.write(_HEADER.pack(
            MAGIC, FORMAT_VERSION, flags, 0,
            header.delta_t, header.h, header.t_f, header.c_a, header.c_m,
            len(records),
        ))
        for payload in records:
            f.write(struct.pack("<I", len(payload)))
            f.write(payload)
            f.write(struct.pack("<I", zlib.crc32(payload)))


def read_dataset(path):
    """Read a TAPD v1 file; returns (scenes, header)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise DatasetError("file too short for a dataset header")
    magic, version, flags, _, delta_t, h, t_f, c_a, c_m, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetError(f"bad magic bytes {magic!r}, not a TAPD dataset")
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported format version {version}")
    header = DatasetHeader(delta_t=delta_t, h=h, t_f=t_f, c_a=c_a, c_m=c_m,
                           reconstructed=bool(flags & 1))
    scenes = []
    off = _HEADER.size
    for i in range(count):
        if off + 4 > len(raw):
            raise DatasetError(f"record {i}: truncated file")
        (plen,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + plen + 4 > len(raw):
            raise DatasetError(f"record {i}: truncated file")
        payload = raw[off : off + plen]
        off += plen
        (crc,) = struct.unpack_from("<I", raw, off)
        off += 4
        if zlib.crc32(payload) != crc:
            raise DatasetError(f"record {i}: checksum mismatch")
        scenes.append(_decode_scene(payload, header, i))
    if off != len(raw):
        raise DatasetError("trailing bytes after the last record")
    return scenes, header


def split_dataset(scenes, ratios, seed: int):
    """Deterministic disjoint (train, val) split by shuffled indices."""
    if len(ratios) != 2 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be two non-negative values summing to 1, got {ratios}")
    if ratios[0] == 0:
        raise ValueError("train ratio must be positive")
    order = np.random.default_rng(seed).permutation(len(scenes))
    n_train = int(round(ratios[0] * len(scenes)))
    train = [scenes[i] for i in order[:n_train]]
    val = [scenes[i] for i in order[n_train:]]
    return train, val


def generate_dataset(n_scenes: int, seed: int, config: GenConfig):
    """n_scenes scenes with per-scene seeds derived from the dataset seed."""
    if n_scenes < 1:
        raise ValueError(f"n_scenes must be >= 1, got {n_scenes}")
    root = np.random.default_rng(seed)
    scene_seeds = root.integers(0, 2**63 - 1, size=n_scenes, dtype=np.int64)
    return [
        generate_scene(int(s), config, scene_id=i) for i, s in enumerate(scene_seeds)
    ]
