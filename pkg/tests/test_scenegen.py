import numpy as np
import pytest

from tapd.scenegen import (
    DatasetError,
    DatasetHeader,
    GenConfig,
    TruncationSpec,
    generate_dataset,
    generate_scene,
    read_dataset,
    split_dataset,
    truncate_history,
    validate_scene,
    write_dataset,
)

CFG = GenConfig()


def scenes_equal(a, b) -> bool:
    if a.scene_id != b.scene_id or a.seed != b.seed or a.aoi_indices != b.aoi_indices:
        return False
    if not np.array_equal(a.map.polylines, b.map.polylines):
        return False
    if len(a.agents) != len(b.agents):
        return False
    for x, y in zip(a.agents, b.agents):
        if x.kind != y.kind or x.is_aoi != y.is_aoi:
            return False
        if not np.array_equal(x.states, y.states):
            return False
    return True


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def test_same_seed_is_bit_identical():
    assert scenes_equal(generate_scene(31, CFG), generate_scene(31, CFG))


def test_config_validation():
    with pytest.raises(ValueError):
        GenConfig(n_agents=0).validate()
    with pytest.raises(ValueError):
        GenConfig(n_agents=9).validate()
    with pytest.raises(ValueError):
        GenConfig(sigma_v=-0.1).validate()
    with pytest.raises(ValueError):
        GenConfig(n_polylines=1).validate()


def test_constant_velocity_zero_noise_is_linear():
    cfg = GenConfig(sigma_v=0.0, behavior_weights=(("constant-velocity", 1.0),))
    scene = generate_scene(5, cfg)
    for agent in scene.agents:
        pos = agent.states[:, 0:2]
        steps = np.diff(pos, axis=0)
        assert np.allclose(steps, steps[0], atol=1e-12)


def test_constant_turn_zero_noise_constant_speed():
    # circular motion oracle: the speed never changes
    cfg = GenConfig(sigma_v=0.0, behavior_weights=(("constant-turn", 1.0),))
    scene = generate_scene(9, cfg)
    for agent in scene.agents:
        speeds = np.linalg.norm(agent.states[:, 2:4], axis=1)
        assert np.abs(speeds - speeds[0]).max() < 1e-9


def test_constant_turn_matches_analytic_rotation():
    cfg = GenConfig(sigma_v=0.0, behavior_weights=(("constant-turn", 1.0),))
    scene = generate_scene(12, cfg)
    agent = scene.agents[0]
    v = agent.states[:, 2:4]
    # successive velocities are the same vector rotated by a fixed angle
    angles = np.arctan2(v[:, 1], v[:, 0])
    deltas = np.diff(np.unwrap(angles))
    assert np.abs(deltas - deltas[0]).max() < 1e-9
    # positions integrate the velocities exactly
    pos = agent.states[:, 0:2]
    assert np.allclose(pos[1:], pos[0] + np.cumsum(v[:-1], axis=0), atol=1e-9)


def test_generated_scene_invariants():
    for seed in range(10):
        scene = generate_scene(seed, CFG)
        validate_scene(scene, CFG)
        assert len(scene.agents) == CFG.n_agents
        assert all(a.states.shape == (CFG.t_total, 6) for a in scene.agents)
        assert scene.aoi_indices


def test_future_reachability_bound():
    for seed in range(10):
        scene = generate_scene(100 + seed, CFG)
        for agent in scene.agents:
            steps = np.linalg.norm(np.diff(agent.states[:, 0:2], axis=0), axis=1)
            assert steps.max() <= CFG.v_max


# ---------------------------------------------------------------------------
# truncation
# ---------------------------------------------------------------------------


def test_truncate_full_length_is_identity():
    scene = generate_scene(3, CFG)
    spec = TruncationSpec(delta_t=5, h=4, tau=4)
    out = truncate_history(scene, spec)
    assert np.array_equal(out, scene.states()[:, :20])


def test_truncate_index_arithmetic():
    scene = generate_scene(4, CFG)
    out = truncate_history(scene, TruncationSpec(delta_t=5, h=4, tau=1))
    assert out.shape[1] == 5
    assert np.array_equal(out, scene.states()[:, 15:20])


def test_truncate_nested_suffix_property():
    scene = generate_scene(8, CFG)
    for tau in range(1, 4):
        shorter = truncate_history(scene, TruncationSpec(5, 4, tau))
        longer = truncate_history(scene, TruncationSpec(5, 4, tau + 1))
        assert np.array_equal(shorter, longer[:, -tau * 5 :])


def test_truncate_rejects_bad_tau():
    with pytest.raises(ValueError):
        TruncationSpec(delta_t=5, h=4, tau=0)
    with pytest.raises(ValueError):
        TruncationSpec(delta_t=5, h=4, tau=5)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_roundtrip_bit_exact(tmp_path):
    scenes = generate_dataset(10, 7, CFG)
    path = tmp_path / "scenes.tapd"
    write_dataset(scenes, path, DatasetHeader.from_config(CFG))
    loaded, header = read_dataset(path)
    assert header.delta_t == 5 and header.h == 4 and header.t_f == 30
    assert not header.reconstructed
    assert len(loaded) == 10
    for a, b in zip(scenes, loaded):
        assert scenes_equal(a, b)


def test_corrupt_payload_names_record(tmp_path):
    scenes = generate_dataset(5, 11, CFG)
    path = tmp_path / "scenes.tapd"
    write_dataset(scenes, path, DatasetHeader.from_config(CFG))
    raw = bytearray(path.read_bytes())
    # flip one byte in the middle of the fourth record's payload
    off = 26  # header size
    for _ in range(3):
        plen = int.from_bytes(raw[off : off + 4], "little")
        off += 4 + plen + 4
    plen = int.from_bytes(raw[off : off + 4], "little")
    raw[off + 4 + plen // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="record 3"):
        read_dataset(path)


def test_empty_dataset_roundtrip(tmp_path):
    path = tmp_path / "empty.tapd"
    write_dataset([], path, DatasetHeader.from_config(CFG))
    loaded, header = read_dataset(path)
    assert loaded == []
    assert header.h == 4


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "bad.tapd"
    path.write_bytes(b"NOPE" + bytes(30))
    with pytest.raises(DatasetError, match="magic"):
        read_dataset(path)
    write_dataset([], path, DatasetHeader.from_config(CFG))
    raw = bytearray(path.read_bytes())
    raw[4] = 99  # version field
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="version"):
        read_dataset(path)


def test_reconstructed_flag_roundtrip(tmp_path):
    scenes = generate_dataset(2, 1, CFG)
    path = tmp_path / "rec.tapd"
    write_dataset(scenes, path, DatasetHeader.from_config(CFG, reconstructed=True))
    _, header = read_dataset(path)
    assert header.reconstructed


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------


def test_split_disjoint_exhaustive():
    scenes = generate_dataset(100, 13, CFG)
    train, val = split_dataset(scenes, (0.8, 0.2), seed=5)
    assert len(train) == 80 and len(val) == 20
    train_ids = {s.scene_id for s in train}
    val_ids = {s.scene_id for s in val}
    assert not train_ids & val_ids
    assert len(train_ids | val_ids) == 100


def test_split_deterministic():
    scenes = generate_dataset(20, 3, CFG)
    a = split_dataset(scenes, (0.7, 0.3), seed=9)
    b = split_dataset(scenes, (0.7, 0.3), seed=9)
    assert [s.scene_id for s in a[0]] == [s.scene_id for s in b[0]]


def test_split_boundary_and_bad_ratios():
    scenes = generate_dataset(10, 2, CFG)
    train, val = split_dataset(scenes, (1.0, 0.0), seed=1)
    assert len(train) == 10 and val == []
    with pytest.raises(ValueError):
        split_dataset(scenes, (0.5, 0.6), seed=1)
    with pytest.raises(ValueError):
        split_dataset(scenes, (-0.1, 1.1), seed=1)
