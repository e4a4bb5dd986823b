"""Shared encoder blocks for the forecaster and the backfiller.

Both models use the same inventory: a per-step state embedding, temporal
mean+max pooling, an agent-agent attention block, a map cross-attention block,
and a fusion projection. All of these weights are shared across observation
lengths; only the normalization parameters interleaved between the blocks are
selected per length, absorbing the statistic shift that different history
lengths induce.

Inputs are batched: states (B, N, T, C_a) and map segments (B, P, S, C_m),
already normalized into the scene frame.
"""

from __future__ import annotations

import numpy as np

from . import numkit as nk
from .numkit import Tensor

LN_SITES = 3

_SHARED_KEYS = (
    "emb_w1", "emb_b1", "emb_w2", "emb_b2",
    "pool_w", "pool_b",
    "attn_wq", "attn_wk", "attn_wv", "attn_wo",
    "map_w1", "map_b1", "map_w2", "map_b2",
    "cross_wq", "cross_wk", "cross_wv", "cross_wo",
    "fuse_w", "fuse_b",
)


def shared_shapes(d: int, c_a: int, c_m: int) -> dict:
    return {
        "emb_w1": (c_a, d), "emb_b1": (d,), "emb_w2": (d, d), "emb_b2": (d,),
        "pool_w": (2 * d, d), "pool_b": (d,),
        "attn_wq": (d, d), "attn_wk": (d, d), "attn_wv": (d, d), "attn_wo": (d, d),
        "map_w1": (c_m, d), "map_b1": (d,), "map_w2": (d, d), "map_b2": (d,),
        "cross_wq": (d, d), "cross_wk": (d, d), "cross_wv": (d, d), "cross_wo": (d, d),
        "fuse_w": (d, d), "fuse_b": (d,),
    }


def init_shared(rng: np.random.Generator, d: int, c_a: int, c_m: int) -> dict:
    """Shared encoder weights: N(0, 1/fan_in) matrices, zero biases."""
    params = {}
    for name, shape in shared_shapes(d, c_a, c_m).items():
        if name.endswith(("_b", "_b1", "_b2")) or len(shape) == 1:
            params[name] = nk.parameter(np.zeros(shape))
        else:
            scale = 1.0 / np.sqrt(shape[0])
            params[name] = nk.parameter(rng.normal(0.0, scale, size=shape))
    return params


def init_ln_rows(n_rows: int, d: int) -> list:
    """Per-length normalization parameters, one row per observation length.

    Rows are initialized identically (gamma=1, beta=0) so any length
    specialization is learned rather than injected.
    """
    rows = []
    for _ in range(n_rows):
        row = {}
        for site in range(1, LN_SITES + 1):
            row[f"g{site}"] = nk.parameter(np.ones(d))
            row[f"b{site}"] = nk.parameter(np.zeros(d))
        rows.append(row)
    return rows


def shared_param_items(shared: dict) -> list:
    return [(k, shared[k]) for k in _SHARED_KEYS]


def ln_param_items(ln_rows: list) -> list:
    items = []
    for i, row in enumerate(ln_rows):
        for site in range(1, LN_SITES + 1):
            items.append((f"ln{i + 1}.g{site}", row[f"g{site}"]))
            items.append((f"ln{i + 1}.b{site}", row[f"b{site}"]))
    return items


def run_encoder(shared: dict, ln_row: dict, x: Tensor, m: Tensor, eps: float = 1e-5) -> Tensor:
    """Encode (B, N, T, C_a) states + (B, P, S, C_m) map into (B, N, d) features."""
    b, n, _, _ = x.shape
    d = shared["emb_w2"].shape[1]

    h = nk.tanh(nk.linear(x, shared["emb_w1"], shared["emb_b1"]))
    h = nk.linear(h, shared["emb_w2"], shared["emb_b2"])  # (B, N, T, d)

    mean_pool = nk.mean(h, axis=2)
    max_pool = nk.reshape(nk.amax(h, axis=2), (b, n, d))
    h = nk.linear(nk.concat([mean_pool, max_pool], axis=-1), shared["pool_w"], shared["pool_b"])
    h = nk.layer_norm(h, ln_row["g1"], ln_row["b1"], eps=eps)

    attn = nk.sdpa(
        nk.matmul(h, shared["attn_wq"]),
        nk.matmul(h, shared["attn_wk"]),
        nk.matmul(h, shared["attn_wv"]),
    )
    h = nk.add(h, nk.matmul(attn, shared["attn_wo"]))
    h = nk.layer_norm(h, ln_row["g2"], ln_row["b2"], eps=eps)

    e = nk.tanh(nk.linear(m, shared["map_w1"], shared["map_b1"]))
    e = nk.linear(e, shared["map_w2"], shared["map_b2"])  # (B, P, S, d)
    e = nk.reshape(e, (b, m.shape[1] * m.shape[2], d))
    cross = nk.sdpa(
        nk.matmul(h, shared["cross_wq"]),
        nk.matmul(e, shared["cross_wk"]),
        nk.matmul(e, shared["cross_wv"]),
    )
    h = nk.add(h, nk.matmul(cross, shared["cross_wo"]))
    h = nk.layer_norm(h, ln_row["g3"], ln_row["b3"], eps=eps)

    return nk.tanh(nk.linear(h, shared["fuse_w"], shared["fuse_b"]))
