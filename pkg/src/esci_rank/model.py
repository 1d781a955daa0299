"""Small cross-encoder with exact analytic gradients.

Pipeline per example::

    token embeddings --(CLS-weighted mean over non-pad positions)--> x
    x --tanh affine--> h_1 --...--> h_L
    pooled = sum_l softmax(pool)_l * h_l
    head: 4-way softmax, evaluated once per dropout ratio in train mode and averaged

All arithmetic is float64 so finite-difference checks are meaningful.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import sparse

from esci_rank.labels import NUM_CLASSES
from esci_rank.tokenizer import TokenizedInput, TokenizerConfig

PROB_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"ESCIRANK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 2**16
    embed_dim: int = 64
    hidden_dims: tuple = (128, 128, 128)
    dropout_ratios: tuple = (0.1, 0.2, 0.3, 0.4, 0.5)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "dropout_ratios", tuple(float(r) for r in self.dropout_ratios))
        if self.embed_dim < 1 or self.vocab_size < 1:
            raise ValueError("embed_dim and vocab_size must be positive")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden_dims must be a non-empty list of positive sizes")
        if len(set(self.hidden_dims)) != 1:
            # the layer pool mixes h_1..h_L elementwise
            raise ValueError(f"all hidden layers must share one width for layer pooling, got {self.hidden_dims}")
        if not self.dropout_ratios:
            raise ValueError("dropout_ratios must not be empty")
        if any(not 0.0 <= r < 1.0 for r in self.dropout_ratios):
            raise ValueError(f"dropout ratios must lie in [0, 1), got {self.dropout_ratios}")

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims)

    @property
    def pool_dim(self) -> int:
        return self.hidden_dims[-1]

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "hidden_dims": list(self.hidden_dims),
            "dropout_ratios": list(self.dropout_ratios),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            vocab_size=int(d["vocab_size"]),
            embed_dim=int(d["embed_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            dropout_ratios=tuple(d["dropout_ratios"]),
            seed=int(d["seed"]),
        )


@dataclass
class ModelParams:
    """Named float64 tensors: ``embedding``, ``W1``/``b1`` ... ``WL``/``bL``, ``pool``, ``head_W``, ``head_b``."""

    config: ModelConfig
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def shallow(self) -> "ModelParams":
        """New container sharing the same arrays; replacing an entry leaves the original untouched."""
        return ModelParams(self.config, OrderedDict(self.tensors))

    def layer_weights(self) -> list[str]:
        return [f"W{i}" for i in range(1, self.config.num_layers + 1)] + ["head_W"]


def _uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig) -> ModelParams:
    rng = np.random.default_rng(cfg.seed)
    t: OrderedDict[str, np.ndarray] = OrderedDict()
    t["embedding"] = _uniform(rng, cfg.vocab_size, cfg.embed_dim)
    fan_in = cfg.embed_dim
    for i, h in enumerate(cfg.hidden_dims, start=1):
        t[f"W{i}"] = _uniform(rng, fan_in, h)
        t[f"b{i}"] = np.zeros(h)
        fan_in = h
    t["pool"] = np.zeros(cfg.num_layers)
    t["head_W"] = _uniform(rng, cfg.pool_dim, NUM_CLASSES)
    t["head_b"] = np.zeros(NUM_CLASSES)
    return ModelParams(cfg, t)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def position_weights(attention_len: np.ndarray, max_len: int) -> np.ndarray:
    """Pooling weights over positions: the CLS slot gets 1/2, the other real tokens share 1/2.

    A sequence holding only CLS puts all weight on it. Padding always gets 0.
    """
    lens = np.asarray(attention_len, dtype=np.int64)
    B = lens.shape[0]
    w = np.zeros((B, max_len))
    pos = np.arange(max_len)[None, :]
    rest = np.maximum(lens - 1, 1)[:, None]
    w[:] = np.where((pos >= 1) & (pos < lens[:, None]), 0.5 / rest, 0.0)
    w[:, 0] = np.where(lens > 1, 0.5, 1.0)
    return w


@dataclass
class ForwardCache:
    mode: str
    ids: np.ndarray
    pos_weights: np.ndarray
    embed_out: np.ndarray  # gathered (and possibly perturbed) embedding outputs, (B, T, d)
    hidden: list  # [x, h_1, ..., h_L]
    pool_weights: np.ndarray
    pooled: np.ndarray
    masks: list  # one (B, H) mask per dropout ratio; [None] in eval mode
    head_probs: list  # per head pass, (B, 4)
    probs: np.ndarray


def _check_ids(params: ModelParams, ids: np.ndarray) -> None:
    if ids.ndim != 2:
        raise ValueError(f"ids must be 2-D (batch, positions), got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= params.config.vocab_size):
        raise ValueError(f"token id out of range for vocab_size {params.config.vocab_size}")


def forward(
    params: ModelParams,
    ids: np.ndarray,
    attention_len: np.ndarray,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
    embed_delta: Optional[np.ndarray] = None,
    dropout_uniforms: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Batched forward pass; returns class probabilities ``(B, 4)`` and the cache for :func:`backward`.

    ``embed_delta`` (same shape as the gathered embeddings) is added to the
    embedding outputs before pooling; adversarial steps use it. In train mode the
    dropout masks come from ``dropout_uniforms`` (``(K, B, H)`` draws in [0, 1),
    one slab per dropout ratio) when given, otherwise from ``rng``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    ids = np.asarray(ids)
    _check_ids(params, ids)
    cfg = params.config
    P = position_weights(attention_len, ids.shape[1])
    emb = params["embedding"][ids]
    if embed_delta is not None:
        if embed_delta.shape != emb.shape:
            raise ValueError(f"embed_delta shape {embed_delta.shape} != embedding outputs {emb.shape}")
        emb = emb + embed_delta
    x = np.einsum("bt,btd->bd", P, emb)

    hidden = [x]
    h = x
    for i in range(1, cfg.num_layers + 1):
        h = np.tanh(h @ params[f"W{i}"] + params[f"b{i}"])
        hidden.append(h)
    s = softmax(params["pool"])
    pooled = sum(s[l] * hidden[l + 1] for l in range(cfg.num_layers))

    if mode == "train":
        K = len(cfg.dropout_ratios)
        if dropout_uniforms is None:
            if rng is None:
                raise ValueError("train mode needs an rng or dropout_uniforms for the dropout masks")
            dropout_uniforms = rng.random((K, *pooled.shape))
        elif dropout_uniforms.shape != (K, *pooled.shape):
            raise ValueError(f"dropout_uniforms must have shape {(K, *pooled.shape)}")
        masks = [(u >= r) / (1.0 - r) for u, r in zip(dropout_uniforms, cfg.dropout_ratios)]
    else:
        masks = [None]
    head_probs = []
    for m in masks:
        inp = pooled if m is None else pooled * m
        head_probs.append(softmax(inp @ params["head_W"] + params["head_b"]))
    # mean written as p_0 + sum(p_k - p_0)/K so identical passes reproduce p_0 bit-for-bit
    p0 = head_probs[0]
    probs = p0 + sum(pk - p0 for pk in head_probs) / len(head_probs)
    cache = ForwardCache(mode, ids, P, emb, hidden, s, pooled, masks, head_probs, probs)
    return probs, cache


def cross_entropy(probs: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-example ``-sum_c target_c * ln(max(probs_c, 1e-12))``."""
    return -(target * np.log(np.maximum(probs, PROB_FLOOR))).sum(axis=-1)


@dataclass
class RowSparse:
    """Gradient touching only ``rows`` of a 2-D tensor (sorted, unique)."""

    rows: np.ndarray
    values: np.ndarray
    shape: tuple

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows] = self.values
        return out

    def __mul__(self, k: float) -> "RowSparse":
        return RowSparse(self.rows, self.values * k, self.shape)

    __rmul__ = __mul__

    @staticmethod
    def sum(parts: list) -> "RowSparse":
        rows = np.concatenate([p.rows for p in parts])
        uniq, inv = np.unique(rows, return_inverse=True)
        values = np.zeros((len(uniq), parts[0].values.shape[1]))
        np.add.at(values, inv, np.concatenate([p.values for p in parts]))
        return RowSparse(uniq, values, parts[0].shape)


def backward(
    params: ModelParams,
    cache: ForwardCache,
    target: np.ndarray,
    scale: float = 1.0,
    sparse_embedding: bool = False,
) -> dict:
    """Gradients of ``scale * sum_b cross_entropy(probs_b, target_b)``.

    Returns a dict keyed like ``params.tensors`` plus ``embedding_outputs``, the
    gradient with respect to the gathered embedding outputs ``(B, T, d)``. With
    ``sparse_embedding`` the embedding-table gradient is a :class:`RowSparse`.
    """
    cfg = params.config
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 1:
        target = target[None, :]
    B = cache.ids.shape[0]
    if target.shape != (B, NUM_CLASSES) or cache.pooled.shape != (B, cfg.pool_dim):
        raise ValueError("stale cache or target shape mismatch")
    if len(cache.hidden) != cfg.num_layers + 1 or cache.embed_out.shape[-1] != cfg.embed_dim:
        raise ValueError("stale cache: it does not match these params")

    probs = cache.probs
    g_p = np.where(probs > PROB_FLOOR, -scale * target / np.maximum(probs, PROB_FLOOR), 0.0)

    K = len(cache.head_probs)
    grads: dict = {}
    d_head_W = np.zeros_like(params["head_W"])
    d_head_b = np.zeros_like(params["head_b"])
    d_pooled = np.zeros_like(cache.pooled)
    for m, pk in zip(cache.masks, cache.head_probs):
        g = g_p / K
        dz = pk * (g - (g * pk).sum(axis=1, keepdims=True))
        inp = cache.pooled if m is None else cache.pooled * m
        d_head_W += inp.T @ dz
        d_head_b += dz.sum(axis=0)
        d_inp = dz @ params["head_W"].T
        d_pooled += d_inp if m is None else d_inp * m

    s = cache.pool_weights
    hidden = cache.hidden
    ds = np.array([(d_pooled * hidden[l + 1]).sum() for l in range(cfg.num_layers)])
    grads["pool"] = s * (ds - (s * ds).sum())

    d_h = [None] * (cfg.num_layers + 1)
    for l in range(cfg.num_layers):
        d_h[l + 1] = s[l] * d_pooled
    for i in range(cfg.num_layers, 0, -1):
        h = hidden[i]
        da = d_h[i] * (1.0 - h * h)
        grads[f"W{i}"] = hidden[i - 1].T @ da
        grads[f"b{i}"] = da.sum(axis=0)
        back = da @ params[f"W{i}"].T
        d_h[i - 1] = back if d_h[i - 1] is None else d_h[i - 1] + back
    dx = d_h[0]

    d_emb = cache.pos_weights[:, :, None] * dx[:, None, :]
    grads["embedding"] = embedding_grad(cache.ids, cache.pos_weights, dx, cfg.vocab_size, sparse_embedding)
    grads["head_W"] = d_head_W
    grads["head_b"] = d_head_b
    grads["embedding_outputs"] = d_emb
    return OrderedDict((k, grads[k]) for k in [*params.names(), "embedding_outputs"])


def embedding_grad(
    ids: np.ndarray, pos_weights: np.ndarray, dx: np.ndarray, vocab_size: int, as_sparse: bool = False
):
    """Scatter ``pos_weights[b, t] * dx[b]`` onto embedding rows ``ids[b, t]``."""
    B, T = ids.shape
    nz = pos_weights != 0.0
    uniq, inv = np.unique(ids[nz], return_inverse=True)
    cols = np.broadcast_to(np.arange(B)[:, None], (B, T))[nz]
    S = sparse.csr_matrix((pos_weights[nz], (inv, cols)), shape=(len(uniq), B))
    values = np.asarray(S @ dx)
    g = RowSparse(uniq, values, (vocab_size, dx.shape[1]))
    return g if as_sparse else g.to_dense()


def predict_proba(
    params: ModelParams, ids: np.ndarray, attention_len: np.ndarray, batch_size: int = 1024
) -> np.ndarray:
    """Eval-mode class probabilities ``(N, 4)``.

    Rows do not depend on batch composition beyond floating-point rounding (BLAS
    kernels vary with matrix shape); identical inputs give bit-identical outputs.
    """
    ids = np.asarray(ids)
    out = np.zeros((ids.shape[0], NUM_CLASSES))
    for start in range(0, ids.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        out[sl], _ = forward(params, ids[sl], np.asarray(attention_len)[sl], mode="eval")
    return out


def forward_one(
    params: ModelParams, item: TokenizedInput, mode: str = "eval", rng: Optional[np.random.Generator] = None
) -> tuple[np.ndarray, ForwardCache]:
    probs, cache = forward(params, item.ids[None, :], np.array([item.attention_len]), mode, rng)
    return probs[0], cache


# --- checkpoints ---------------------------------------------------------


def save_params(
    params: ModelParams, path: Union[str, Path], tokenizer: Optional[TokenizerConfig] = None
) -> None:
    """Write a self-describing binary checkpoint; identical params give identical bytes."""
    header = {
        "format": "esci-rank-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model_config": params.config.to_dict(),
        "tokenizer_config": None if tokenizer is None else tokenizer.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for v in params.tensors.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_params(path: Union[str, Path]) -> tuple[ModelParams, Optional[TokenizerConfig]]:
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off : off + n].decode("utf-8"))
    off += n
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    cfg = ModelConfig.from_dict(header["model_config"])
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
        tensors[spec["name"]] = arr
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after tensors")
    tok = header.get("tokenizer_config")
    return ModelParams(cfg, tensors), (None if tok is None else TokenizerConfig.from_dict(tok))
