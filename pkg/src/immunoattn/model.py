"""Dual RoPE cross-attention network with attention pooling and an MLP head.

Forward and backward are written out by hand in numpy. Every intermediate the
backward pass needs is kept on the :class:`ForwardTrace`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from . import _kernels
from .datasets import ProteinRecord
from .embedio import COARSE_VOCAB, FINE_VOCAB, EmbeddingBundle
from .errors import DataError

N_DESCRIPTORS = 8
MASK_VALUE = -1e9
BLOCKS = ("fine", "coarse")


@dataclass(frozen=True)
class ModelConfig:
    d: int
    n_heads: int = 8
    dropout_p: float = 0.1
    hidden: int | None = None
    rope_base: float = 10000.0
    dtype: str = "float64"

    def __post_init__(self):
        if self.d < 1 or self.n_heads < 1 or self.d % self.n_heads:
            raise ValueError(f"d={self.d} must be a positive multiple of n_heads={self.n_heads}")
        if (self.d // self.n_heads) % 2:
            raise ValueError(f"per-head width {self.d // self.n_heads} must be even for RoPE")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.rope_base <= 1.0:
            raise ValueError(f"rope_base must exceed 1, got {self.rope_base}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype}")
        if self.hidden is None:
            object.__setattr__(self, "hidden", self.d)
        elif self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")

    @property
    def d_k(self) -> int:
        return self.d // self.n_heads

    @property
    def width(self) -> int:
        """Concatenated feature width D = 3d + 8."""
        return 3 * self.d + N_DESCRIPTORS


@dataclass
class ModelParams:
    fine_table: np.ndarray
    coarse_table: np.ndarray
    fine_wq: np.ndarray
    fine_wk: np.ndarray
    fine_wv: np.ndarray
    fine_wo: np.ndarray
    coarse_wq: np.ndarray
    coarse_wk: np.ndarray
    coarse_wv: np.ndarray
    coarse_wo: np.ndarray
    pool_w: np.ndarray
    pool_b: np.ndarray
    head_w1: np.ndarray
    head_b1: np.ndarray
    head_w2: np.ndarray
    head_b2: np.ndarray

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def items(self):
        return [(n, getattr(self, n)) for n in self.names()]

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ModelParams":
        return ModelParams(**{n: fn(a) for n, a in self.items()})

    def copy(self) -> "ModelParams":
        return self.map(np.array)

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: a.shape for n, a in self.items()}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, D, h = config.d, config.width, config.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "fine_table": (FINE_VOCAB, d),
        "coarse_table": (COARSE_VOCAB, d),
    }
    for blk in BLOCKS:
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{blk}_{w}"] = (d, d)
    shapes.update(
        pool_w=(D, 1), pool_b=(1,), head_w1=(D, h), head_b1=(h,), head_w2=(h, 2), head_b2=(2,)
    )
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) linear weights, zero biases, N(0, 0.02) tables."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("_table"):
            arr = rng.normal(0.0, 0.02, size=shape)
        elif name in ("pool_b", "head_b1", "head_b2"):
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        out[name] = arr.astype(config.dtype)
    return ModelParams(**out)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _rope_tables(L: int, width: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    ang = _kernels.rope_angles(np.arange(L), width, base)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_rotate(x: np.ndarray, positions, rope_base: float = 10000.0) -> np.ndarray:
    """Rotate channel pairs (2t, 2t+1) of row i by ``positions[i] * base**(-2t/w)``.

    ``x`` is (L, w) or (L, heads, w); w is the rotated width and must be even.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        raise ValueError(f"RoPE needs an even width, got {x.shape[-1]}")
    squeeze = x.ndim == 2
    x3 = x[:, None, :] if squeeze else x
    ang = _kernels.rope_angles(np.asarray(positions), x.shape[-1], rope_base)
    out = _kernels.rope_apply(np.ascontiguousarray(x3), np.cos(ang), np.sin(ang))
    return out[:, 0, :] if squeeze else out


def _check_block_params(block: dict[str, np.ndarray], d: int) -> None:
    for k in ("wq", "wk", "wv", "wo"):
        if block[k].shape != (d, d):
            raise DataError(f"{k} has shape {block[k].shape}, expected {(d, d)}")


def _block(params: ModelParams, name: str) -> dict[str, np.ndarray]:
    return {w: getattr(params, f"{name}_{w}") for w in ("wq", "wk", "wv", "wo")}


def _cross_attention(E_q, E_s, block, config: ModelConfig):
    L, d = E_s.shape
    h, dk = config.n_heads, config.d_k
    cos, sin = _rope_tables(L, dk, config.rope_base, E_s.dtype)
    Q = (E_q @ block["wq"]).reshape(L, h, dk)
    K = (E_s @ block["wk"]).reshape(L, h, dk)
    V = (E_s @ block["wv"]).reshape(L, h, dk)
    Qr = _kernels.rope_apply(np.ascontiguousarray(Q), cos, sin)
    Kr = _kernels.rope_apply(np.ascontiguousarray(K), cos, sin)
    S = np.einsum("ihc,jhc->hij", Qr, Kr) / math.sqrt(dk)
    A = softmax(S, axis=-1)
    O = np.einsum("hij,jhc->ihc", A, V).reshape(L, d)
    out = O @ block["wo"]
    cache = dict(E_q=E_q, V=V, Qr=Qr, Kr=Kr, A=A, O=O, cos=cos, sin=sin)
    return out, cache


def cross_attention(E_query, E_seq, block_params: dict[str, np.ndarray], config: ModelConfig):
    """Multi-head attention with queries from ``E_query`` and keys/values from
    ``E_seq``; RoPE on queries and keys; heads mixed by ``wo``."""
    E_query = np.asarray(E_query)
    E_seq = np.asarray(E_seq)
    if E_query.shape != E_seq.shape or E_seq.ndim != 2 or E_seq.shape[1] != config.d:
        raise DataError(
            f"cross_attention expects two L x {config.d} inputs, got {E_query.shape} and {E_seq.shape}"
        )
    _check_block_params(block_params, config.d)
    return _cross_attention(E_query, E_seq, block_params, config)[0]


def attention_pool(H, mask, pool_w, pool_b):
    """Softmax-weighted sum of rows of H; scores from a width-1 linear map."""
    H = np.asarray(H)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (H.shape[0],):
        raise DataError(f"mask length {mask.shape} does not match L={H.shape[0]}")
    if not mask.any():
        raise DataError("attention pooling needs at least one unmasked position")
    scores = H @ np.asarray(pool_w).reshape(-1) + np.asarray(pool_b).reshape(())
    scores = np.where(mask, scores, MASK_VALUE)
    alpha = softmax(scores)
    alpha = np.where(mask, alpha, 0.0)
    return alpha @ H, alpha


def head_forward(pooled, params: ModelParams, dropout_mask=None):
    """Linear -> Dropout -> ReLU -> Linear.

    ``dropout_mask`` is the already-scaled inverted-dropout multiplier
    (entries 0 or 1/(1-p)); ``None`` means eval mode.
    """
    z1 = pooled @ params.head_w1 + params.head_b1
    dropped = z1 if dropout_mask is None else z1 * dropout_mask
    r = np.maximum(dropped, 0.0)
    return r @ params.head_w2 + params.head_b2, dict(z1=z1, dropped=dropped, r=r)


def make_dropout_mask(config: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    p = config.dropout_p
    keep = rng.random(config.hidden) >= p
    return keep.astype(config.dtype) / (1.0 - p)


@dataclass
class ForwardTrace:
    logits: np.ndarray
    alpha: np.ndarray
    pooled: np.ndarray
    dropout_mask: np.ndarray | None = None
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def positive_probability(self) -> float:
        return float(softmax(self.logits)[1])


def model_forward(
    bundle: EmbeddingBundle,
    descriptor_matrix: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    dropout_mask: np.ndarray | None = None,
) -> ForwardTrace:
    """Full forward pass for one protein.

    In ``"train"`` mode the dropout mask is either given explicitly or drawn
    from ``rng``; it is recorded on the trace so backward can replay it.
    """
    dtype = np.dtype(config.dtype)
    E_seq = np.asarray(bundle.seq_embedding, dtype=dtype)
    L = E_seq.shape[0]
    E_ez = np.asarray(descriptor_matrix, dtype=dtype)
    if E_seq.ndim != 2 or E_seq.shape[1] != config.d:
        raise DataError(f"bundle {bundle.id!r} width {E_seq.shape[-1]} != model d={config.d}")
    if E_ez.shape != (L, N_DESCRIPTORS):
        raise DataError(
            f"bundle {bundle.id!r}: descriptor matrix {E_ez.shape} does not match L={L}"
        )
    fine = np.asarray(bundle.fine_tokens)
    coarse = np.asarray(bundle.coarse_tokens)
    E_fine = params.fine_table[fine]
    E_coarse = params.coarse_table[coarse]
    H_fine, c_fine = _cross_attention(E_fine, E_seq, _block(params, "fine"), config)
    H_coarse, c_coarse = _cross_attention(E_coarse, E_seq, _block(params, "coarse"), config)
    H = np.concatenate([E_seq, H_fine, H_coarse, E_ez], axis=1)
    mask = np.ones(L, dtype=bool)
    pooled, alpha = attention_pool(H, mask, params.pool_w, params.pool_b)

    if mode == "train":
        if dropout_mask is None:
            if rng is None:
                raise ValueError("train mode needs an rng or an explicit dropout mask")
            dropout_mask = make_dropout_mask(config, rng)
    elif mode == "eval":
        dropout_mask = None
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    logits, c_head = head_forward(pooled, params, dropout_mask)
    cache = dict(
        E_seq=E_seq, fine=fine, coarse=coarse, H=H, mask=mask,
        fine_block=c_fine, coarse_block=c_coarse, head=c_head,
    )
    return ForwardTrace(logits, alpha, pooled, dropout_mask, cache)


def cross_entropy(logits: np.ndarray, label: int) -> float:
    z = logits - np.max(logits)
    return float(np.log(np.sum(np.exp(z))) - z[label])


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _cross_attention_backward(dout, cache, block, config: ModelConfig):
    """Returns (grads for wq/wk/wv/wo, d E_query). E_seq is an input, not learned."""
    L = dout.shape[0]
    h, dk = config.n_heads, config.d_k
    A, V, Qr, Kr, O = cache["A"], cache["V"], cache["Qr"], cache["Kr"], cache["O"]
    E_s = cache["E_s"]
    g = {"wo": O.T @ dout}
    dO = (dout @ block["wo"].T).reshape(L, h, dk)
    dA = np.einsum("ihc,jhc->hij", dO, V)
    dV = np.einsum("hij,ihc->jhc", A, dO)
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) / math.sqrt(dk)
    dQr = np.einsum("hij,jhc->ihc", dS, Kr)
    dKr = np.einsum("hij,ihc->jhc", dS, Qr)
    # inverse rotation = rotation by the negated angle
    dQ = _kernels.rope_apply(np.ascontiguousarray(dQr), cache["cos"], -cache["sin"]).reshape(L, -1)
    dK = _kernels.rope_apply(np.ascontiguousarray(dKr), cache["cos"], -cache["sin"]).reshape(L, -1)
    dV = dV.reshape(L, -1)
    g["wq"] = cache["E_q"].T @ dQ
    g["wk"] = E_s.T @ dK
    g["wv"] = E_s.T @ dV
    dE_q = dQ @ block["wq"].T
    return g, dE_q


def model_backward(trace: ForwardTrace, label: int, params: ModelParams, config: ModelConfig) -> ModelParams:
    """Exact gradient of the 2-class cross-entropy w.r.t. every parameter."""
    c = trace.cache
    grads = {}
    d = config.d

    dlogits = softmax(trace.logits)
    dlogits[label] -= 1.0
    ch = c["head"]
    grads["head_w2"] = np.outer(ch["r"], dlogits)
    grads["head_b2"] = dlogits
    dr = params.head_w2 @ dlogits
    ddropped = dr * (ch["dropped"] > 0)
    dz1 = ddropped if trace.dropout_mask is None else ddropped * trace.dropout_mask
    grads["head_w1"] = np.outer(trace.pooled, dz1)
    grads["head_b1"] = dz1
    dpooled = params.head_w1 @ dz1

    H, alpha = c["H"], trace.alpha
    dH = np.outer(alpha, dpooled)
    dalpha = H @ dpooled
    dscore = alpha * (dalpha - alpha @ dalpha)
    dscore = np.where(c["mask"], dscore, 0.0)
    grads["pool_w"] = (H.T @ dscore)[:, None]
    grads["pool_b"] = np.array([dscore.sum()], dtype=dscore.dtype)
    dH += np.outer(dscore, params.pool_w[:, 0])

    for i, blk in enumerate(BLOCKS):
        dblk = dH[:, d * (i + 1) : d * (i + 2)]
        cache = dict(c[f"{blk}_block"], E_s=c["E_seq"])
        g, dE_q = _cross_attention_backward(dblk, cache, _block(params, blk), config)
        for w, val in g.items():
            grads[f"{blk}_{w}"] = val
        table = getattr(params, f"{blk}_table")
        dtable = np.zeros_like(table)
        np.add.at(dtable, c[blk], dE_q)
        grads[f"{blk}_table"] = dtable
    return ModelParams(**grads)


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------


def export_attention(trace: ForwardTrace, record: ProteinRecord) -> list[tuple[int, str, float]]:
    """One ``(position, residue, alpha)`` row per residue; positions are 1-based."""
    if len(record.sequence) != len(trace.alpha):
        raise DataError(
            f"record {record.id!r} has length {len(record.sequence)}, trace has {len(trace.alpha)}"
        )
    return [(i + 1, aa, float(a)) for i, (aa, a) in enumerate(zip(record.sequence, trace.alpha))]
