"""Temporal backfilling: reconstruct the unobserved history prefix.

The backfiller mirrors the forecaster's encoder (shared weights across
lengths, per-length normalization) and decodes a small set of candidate
prefixes covering the missing leading steps of the observation window. One
decoder head is sized for the longest possible prefix; shorter prefixes take
its trailing rows, so a given head position always means the same temporal
distance from the first observed step.

Completion is pure concatenation: the observed suffix is never altered.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .encoder import init_ln_rows, init_shared, ln_param_items, run_encoder, shared_param_items
from .numkit import Tensor
from .scenegen import C_A, C_M


@dataclass(frozen=True)
class TbmConfig:
    d: int = 64
    k_rec: int = 3
    h: int = 4
    delta_t: int = 5
    c_a: int = C_A
    c_m: int = C_M
    ln_eps: float = 1e-5

    @property
    def t_obs(self) -> int:
        return self.h * self.delta_t

    @property
    def max_prefix(self) -> int:
        return (self.h - 1) * self.delta_t


_DECODER_KEYS = ("dec_w1", "dec_b1", "prefix_w", "prefix_b", "mode_w", "mode_b")


@dataclass
class TbmParams:
    """Reconstruction encoder (shared + per-length LN) and prefix decoder."""

    config: TbmConfig
    shared: dict = field(repr=False, default=None)
    ln: list = field(repr=False, default=None)  # h-1 rows; tau=h needs no backfill
    decoder: dict = field(repr=False, default=None)

    @classmethod
    def init(cls, config: TbmConfig, seed: int) -> "TbmParams":
        rng = np.random.default_rng(seed)
        shared = init_shared(rng, config.d, config.c_a, config.c_m)
        ln = init_ln_rows(config.h - 1, config.d)
        d = config.d
        out_width = config.k_rec * config.max_prefix * config.c_a
        decoder = {
            "dec_w1": nk.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))),
            "dec_b1": nk.parameter(np.zeros(d)),
            "prefix_w": nk.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, out_width))),
            "prefix_b": nk.parameter(np.zeros(out_width)),
            "mode_w": nk.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, config.k_rec))),
            "mode_b": nk.parameter(np.zeros(config.k_rec)),
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
class BackfillResult:
    prefix: np.ndarray  # (N, L, C_a) reconstructed states
    completed: np.ndarray  # (N, t_obs, C_a), trailing steps bit-identical to input
    chosen_modes: np.ndarray  # (N,) argmax-logit candidate per agent
    mode_logits: np.ndarray  # (N, k_rec)


def _check_tau(cfg: TbmConfig, tau: int) -> None:
    if tau == cfg.h:
        raise ValueError(f"tau={tau} is the full length; nothing to backfill")
    if not 1 <= tau < cfg.h:
        raise ValueError(f"tau must be in [1, {cfg.h - 1}], got {tau}")


def tbm_encode(x, m, tau: int, params: TbmParams) -> Tensor:
    """Reconstruction features (N, d) or (B, N, d) at length tau < h."""
    cfg = params.config
    _check_tau(cfg, tau)
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
    f_rec = run_encoder(params.shared, params.ln[tau - 1], x, m, eps=cfg.ln_eps)
    if not batched:
        f_rec = nk.reshape(f_rec, f_rec.shape[1:])
    return f_rec


def tbm_decode(f_rec: Tensor, tau: int, params: TbmParams) -> tuple:
    """Candidate prefixes (..., N, K_rec, (h-tau)*delta_t, C_a) plus logits.

    The single maximal-length head is truncated to the needed prefix by
    taking its trailing rows: the last head position always decodes the step
    immediately before the first observed one.
    """
    cfg = params.config
    _check_tau(cfg, tau)
    if f_rec.shape[-1] != cfg.d:
        raise ValueError(f"feature width {f_rec.shape[-1]} != d={cfg.d}")
    dec = params.decoder
    t = nk.tanh(nk.linear(f_rec, dec["dec_w1"], dec["dec_b1"]))
    raw = nk.linear(t, dec["prefix_w"], dec["prefix_b"])
    lead = f_rec.shape[:-1]
    raw = nk.reshape(raw, (*lead, cfg.k_rec, cfg.max_prefix, cfg.c_a))
    length = (cfg.h - tau) * cfg.delta_t
    if length < cfg.max_prefix:
        key = tuple([slice(None)] * (raw.ndim - 2) + [slice(cfg.max_prefix - length, cfg.max_prefix)])
        candidates = nk.slice_(raw, key)
    else:
        candidates = raw
    logits = nk.linear(t, dec["mode_w"], dec["mode_b"])
    return candidates, logits


def complete_history(x_tau: np.ndarray, prefix: np.ndarray, t_obs: int) -> np.ndarray:
    """Concatenate prefix and observed suffix along time; the suffix is
    preserved bit-exactly."""
    if prefix.shape[1] + x_tau.shape[1] != t_obs:
        raise ValueError(
            f"prefix steps {prefix.shape[1]} + observed steps {x_tau.shape[1]} != {t_obs}"
        )
    return np.concatenate([prefix, x_tau], axis=1)


def tbm_loss(candidates: Tensor, logits: Tensor, gt_prefix) -> tuple:
    """Winner-take-all reconstruction supervision for one length.

    The winning candidate per agent is the one whose earliest reconstructed
    position is closest to the true earliest missing state; it is regressed
    onto the ground-truth prefix, and its index is the classification label.
    """
    gt = np.asarray(gt_prefix, dtype=np.float64)
    cand = candidates
    lg = logits
    if cand.ndim == 4:  # (N, K, L, C_a) -> batch of one
        cand = nk.reshape(cand, (1, *cand.shape))
        lg = nk.reshape(lg, (1, *lg.shape))
        gt = gt[None]
    b, n, k, length, c_a = cand.shape
    if gt.shape != (b, n, length, c_a):
        raise ValueError(f"ground-truth prefix shape {gt.shape} != {(b, n, length, c_a)}")

    earliest_err = np.linalg.norm(
        cand.numpy()[:, :, :, 0, 0:2] - gt[:, :, None, 0, 0:2], axis=-1
    )
    winners = np.argmin(earliest_err, axis=-1)  # (B, N)

    onehot = np.zeros((b, n, k, 1, 1))
    bb, nn = np.meshgrid(np.arange(b), np.arange(n), indexing="ij")
    onehot[bb, nn, winners] = 1.0
    winner_prefix = nk.sum_(nk.mul(cand, Tensor(onehot)), axis=2)
    l_reg = nk.smooth_l1_loss(winner_prefix, Tensor(gt))
    l_cls = nk.cross_entropy_loss(lg, winners)
    return l_reg, l_cls


def _kinematic_fix(prefix_states: np.ndarray, first_obs: np.ndarray) -> np.ndarray:
    """Recompute velocity and heading channels from reconstructed positions.

    Velocities are forward differences, with the last prefix step stitched to
    the first observed position, so the completed history is kinematically
    self-consistent. Raw decoder values for those channels are discarded.
    """
    out = prefix_states.copy()
    pos = prefix_states[..., 0:2]
    nxt = np.concatenate([pos[:, 1:], first_obs[:, None, 0:2]], axis=1)
    vel = nxt - pos
    out[..., 2:4] = vel
    speed = np.linalg.norm(vel, axis=-1)
    n, length = speed.shape
    heading = np.zeros((n, length, 2))
    for i in range(n):
        prev = None
        for t in range(length):
            if speed[i, t] > 1e-9:
                prev = vel[i, t] / speed[i, t]
            elif prev is None:
                prev = np.array([1.0, 0.0])
            heading[i, t] = prev
    out[..., 4:6] = heading
    return out


def backfill(x_tau, m, tau: int, params: TbmParams) -> BackfillResult:
    """Inference path: encode, decode, pick the argmax-logit candidate per
    agent (ties to the lowest index), fix kinematic channels, concatenate."""
    cfg = params.config
    _check_tau(cfg, tau)
    x_arr = np.asarray(x_tau, dtype=np.float64)
    with nk.no_grad():
        f_rec = tbm_encode(x_arr, m, tau, params)
        candidates, logits = tbm_decode(f_rec, tau, params)
    cand = candidates.numpy()
    lg = logits.numpy()
    chosen = np.argmax(lg, axis=-1)  # argmax ties resolve to the lowest index
    picked = cand[np.arange(cand.shape[0]), chosen]
    fixed = _kinematic_fix(picked, x_arr[:, 0])
    completed = complete_history(x_arr, fixed, cfg.t_obs)
    return BackfillResult(
        prefix=fixed, completed=completed, chosen_modes=chosen, mode_logits=lg
    )


def backfill_batch(x_tau: np.ndarray, m: np.ndarray, tau: int, params: TbmParams) -> np.ndarray:
    """Batched completion (B, N, t_obs, C_a) for the finetuning/eval paths."""
    cfg = params.config
    _check_tau(cfg, tau)
    with nk.no_grad():
        f_rec = tbm_encode(x_tau, m, tau, params)
        candidates, logits = tbm_decode(f_rec, tau, params)
    cand = candidates.numpy()
    lg = logits.numpy()
    b, n = cand.shape[0], cand.shape[1]
    chosen = np.argmax(lg, axis=-1)
    bb, nn = np.meshgrid(np.arange(b), np.arange(n), indexing="ij")
    picked = cand[bb, nn, chosen]
    fixed = np.stack([
        _kinematic_fix(picked[i], x_tau[i, :, 0]) for i in range(b)
    ])
    return np.concatenate([fixed, x_tau], axis=2)
