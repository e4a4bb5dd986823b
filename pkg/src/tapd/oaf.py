"""Observation-adaptive forecaster.

One predictor serves every observation length: encoder and decoder weights
are shared across lengths, and only small normalization parameter sets are
selected per length. Alongside multimodal trajectory decoding, the encoder
exposes full-agent feature matrices that an alignment loss pulls toward the
features of the next-longer history, detached so knowledge flows one way,
from longer histories to shorter ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .batching import SceneBatch
from .encoder import init_ln_rows, init_shared, ln_param_items, run_encoder, shared_param_items
from .numkit import Tensor
from .scenegen import C_A, C_M, Scene


@dataclass(frozen=True)
class OafConfig:
    d: int = 64
    k_modes: int = 6
    h: int = 4
    delta_t: int = 5
    t_f: int = 30
    c_a: int = C_A
    c_m: int = C_M
    ln_eps: float = 1e-5

    @property
    def t_obs(self) -> int:
        return self.h * self.delta_t


_DECODER_KEYS = ("dec_w1", "dec_b1", "traj_w", "traj_b", "mode_w", "mode_b")


@dataclass
class OafParams:
    """Shared encoder weights, per-length normalization, shared decoder."""

    config: OafConfig
    shared: dict = field(repr=False, default=None)
    ln: list = field(repr=False, default=None)  # one row per tau in 1..h
    decoder: dict = field(repr=False, default=None)

    @classmethod
    def init(cls, config: OafConfig, seed: int) -> "OafParams":
        rng = np.random.default_rng(seed)
        shared = init_shared(rng, config.d, config.c_a, config.c_m)
        ln = init_ln_rows(config.h, config.d)
        d, k, t_f = config.d, config.k_modes, config.t_f
        decoder = {
            "dec_w1": nk.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))),
            "dec_b1": nk.parameter(np.zeros(d)),
            "traj_w": nk.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, k * t_f * 2))),
            "traj_b": nk.parameter(np.zeros(k * t_f * 2)),
            "mode_w": nk.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, k))),
            "mode_b": nk.parameter(np.zeros(k)),
        }
        return cls(config=config, shared=shared, ln=ln, decoder=decoder)

    def named_parameters(self) -> list:
        items = [(f"shared.{k}", t) for k, t in shared_param_items(self.shared)]
        items += [(f"enc.{k}", t) for k, t in ln_param_items(self.ln)]
        items += [(f"dec.{k}", self.decoder[k]) for k in _DECODER_KEYS]
        return items

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]


@dataclass
class EncodedScene:
    """Per-agent fused features for one observation length."""

    f_e: Tensor  # (N, d) or (B, N, d)
    tau: int

    @property
    def n_agents(self) -> int:
        return self.f_e.shape[-2]


@dataclass
class ModePrediction:
    trajectories: Tensor  # (A, K, T_f, 2) or (B, A, K, T_f, 2), per-AOI frame
    mode_logits: Tensor  # (A, K) or (B, A, K)


def encode(x, m, tau: int, params: OafParams) -> EncodedScene:
    """Fuse motion and map context into per-agent features at length tau.

    x is (N, T_tau, C_a) or (B, N, T_tau, C_a) in the scene frame with
    T_tau = tau * delta_t; only the normalization parameters differ by tau.
    """
    cfg = params.config
    if not 1 <= tau <= cfg.h:
        raise ValueError(f"tau must be in [1, {cfg.h}], got {tau}")
    x = nk.as_tensor(x)
    m = nk.as_tensor(m)
    batched = x.ndim == 4
    if not batched:
        x = nk.reshape(x, (1, *x.shape))
        m = nk.reshape(m, (1, *m.shape))
    if x.shape[2] != tau * cfg.delta_t:
        raise ValueError(
            f"observed steps {x.shape[2]} inconsistent with tau={tau} "
            f"(expected {tau * cfg.delta_t})"
        )
    f_e = run_encoder(params.shared, params.ln[tau - 1], x, m, eps=cfg.ln_eps)
    if not batched:
        f_e = nk.reshape(f_e, f_e.shape[1:])
    return EncodedScene(f_e=f_e, tau=tau)


def extract_aoi(enc: EncodedScene, aoi_indices) -> Tensor:
    """Row-gather of the encoded features for the agents of interest."""
    n = enc.n_agents
    idx = np.asarray(aoi_indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"aoi_indices must be a flat index list, got shape {idx.shape}")
    if idx.size == 0 or idx.min() < 0 or idx.max() >= n:
        raise IndexError(f"aoi indices {aoi_indices} out of range for {n} agents")
    onehot = np.zeros((idx.size, n))
    onehot[np.arange(idx.size), idx] = 1.0
    if enc.f_e.ndim == 3:
        onehot = np.broadcast_to(onehot, (enc.f_e.shape[0], idx.size, n))
    return nk.matmul(Tensor(onehot), enc.f_e)


def extract_aoi_batch(enc: EncodedScene, aoi_onehot: np.ndarray) -> Tensor:
    """Batched gather with per-scene one-hot rows (B, A, N)."""
    return nk.matmul(Tensor(aoi_onehot), enc.f_e)


def extract_agents(enc: EncodedScene) -> Tensor:
    """All N agent rows: the feature surface the alignment loss acts on."""
    return enc.f_e


def decode(aoi_features: Tensor, params: OafParams) -> ModePrediction:
    """K candidate trajectories plus mode logits from AOI features.

    Trajectories are cumulative sums of per-step displacement offsets, so
    they start near the origin of each AOI's target frame. The decoder is
    length-blind: a pure function of (features, decoder weights).
    """
    cfg = params.config
    if aoi_features.shape[-1] != cfg.d:
        raise ValueError(f"feature width {aoi_features.shape[-1]} != d={cfg.d}")
    dec = params.decoder
    t = nk.tanh(nk.linear(aoi_features, dec["dec_w1"], dec["dec_b1"]))
    offsets = nk.linear(t, dec["traj_w"], dec["traj_b"])
    lead = aoi_features.shape[:-1]
    offsets = nk.reshape(offsets, (*lead, cfg.k_modes, cfg.t_f, 2))
    trajectories = nk.cumsum_steps(offsets)
    logits = nk.linear(t, dec["mode_w"], dec["mode_b"])
    return ModePrediction(trajectories=trajectories, mode_logits=logits)


def pkd_loss(features_by_length) -> Tensor:
    """Mean L1 alignment of each length's features to the detached features
    of the next longer length, averaged over the adjacent pairs present."""
    taus = sorted(features_by_length)
    pairs = [(t, t + 1) for t in taus if t + 1 in features_by_length]
    if not pairs:
        raise ValueError(
            f"alignment needs at least two consecutive lengths, got {taus}"
        )
    ref_shape = features_by_length[taus[0]].shape
    for t in taus:
        if features_by_length[t].shape != ref_shape:
            raise ValueError(
                f"feature shapes differ across lengths: {ref_shape} vs "
                f"{features_by_length[t].shape} at tau={t}"
            )
    total = None
    for student_tau, teacher_tau in pairs:
        student = features_by_length[student_tau]
        teacher = nk.detach(features_by_length[teacher_tau])
        term = nk.mean(nk.abs_(nk.add(student, nk.neg(teacher))))
        total = term if total is None else nk.add(total, term)
    return nk.mul(total, nk.as_tensor(1.0 / len(pairs)))


def prediction_loss(pred: ModePrediction, y) -> tuple:
    """Winner-take-all supervision: per AOI, the mode with the smallest
    final-step displacement is regressed onto the target and becomes the
    classification label (a constant; no gradient through the selection)."""
    traj = pred.trajectories
    logits = pred.mode_logits
    y_arr = np.asarray(y, dtype=np.float64)
    if traj.ndim == 4:  # (A, K, T_f, 2) -> batch of one
        traj = nk.reshape(traj, (1, *traj.shape))
        logits = nk.reshape(logits, (1, *logits.shape))
        y_arr = y_arr[None]
    b, a, k, t_f, _ = traj.shape
    if y_arr.shape != (b, a, t_f, 2):
        raise ValueError(f"target shape {y_arr.shape} != {(b, a, t_f, 2)}")

    final_err = np.linalg.norm(traj.numpy()[:, :, :, -1, :] - y_arr[:, :, None, -1, :], axis=-1)
    winners = np.argmin(final_err, axis=-1)  # (B, A); ties -> lowest index

    onehot = np.zeros((b, a, k, 1, 1))
    bb, aa = np.meshgrid(np.arange(b), np.arange(a), indexing="ij")
    onehot[bb, aa, winners] = 1.0
    winner_traj = nk.sum_(nk.mul(traj, Tensor(onehot)), axis=2)
    l_reg = nk.smooth_l1_loss(winner_traj, Tensor(y_arr))
    l_cls = nk.cross_entropy_loss(logits, winners)
    return l_reg, l_cls


def forward_all_lengths(scene, params: OafParams, lengths) -> dict:
    """Encode and decode the same scene once per requested length.

    Returns {tau: (ModePrediction, full-agent features)}. Teacher detachment
    is the alignment loss's job, not done here.
    """
    cfg = params.config
    lengths = sorted(set(lengths))
    if not lengths:
        raise ValueError("lengths must be non-empty")
    if any(not 1 <= t <= cfg.h for t in lengths):
        raise ValueError(f"lengths {lengths} outside [1, {cfg.h}]")

    single = isinstance(scene, Scene)
    batch = SceneBatch.from_scenes([scene], cfg.t_obs) if single else scene
    out = {}
    for tau in lengths:
        x_tau = batch.truncated(tau * cfg.delta_t)
        enc = encode(x_tau, batch.map_feats, tau, params)
        f_ag = extract_agents(enc)
        aoi_feats = extract_aoi_batch(enc, batch.aoi_onehot)
        pred = decode(aoi_feats, params)
        if single:
            pred = ModePrediction(
                trajectories=nk.reshape(pred.trajectories, pred.trajectories.shape[1:]),
                mode_logits=nk.reshape(pred.mode_logits, pred.mode_logits.shape[1:]),
            )
            f_ag = nk.reshape(f_ag, f_ag.shape[1:])
        out[tau] = (pred, f_ag)
    return out
