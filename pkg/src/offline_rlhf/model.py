"""Decoder-only transformer (RoPE, SwiGLU, RMSNorm, no biases, untied output)
and its reward-model variant with a scalar head.

Parameters live in a flat ``name -> Tensor`` mapping so the optimiser and the
checkpoint writer can treat them uniformly.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class ConfigError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 258
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 128
    max_seq_len: int = 256
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.head_dim % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be at least 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class ModelParams:
    """Policy weights.  ``kind`` is "lm" (unembedding) or "rm" (scalar head)."""

    config: ModelConfig
    tensors: dict[str, Tensor]
    kind: str = "lm"
    meta: dict = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return ModelParams(self.config, tensors, self.kind, dict(self.meta))

    def copy(self) -> "ModelParams":
        return self.with_arrays({k: v.copy() for k, v in self.arrays().items()})

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
        return h.hexdigest()


# RewardModelParams share the container; the head is "head.w" instead of "unembed".
RewardModelParams = ModelParams


def _layer_names(i: int) -> list[str]:
    p = f"layers.{i}."
    return [p + n for n in ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")]


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Normal(0, 0.02) init; residual output projections scaled by 1/sqrt(2 * n_layers)."""
    rng = np.random.default_rng(seed)
    std = 0.02
    resid_std = std / math.sqrt(2 * cfg.n_layers)
    d, f = cfg.d_model, cfg.d_ff
    arrays: dict[str, np.ndarray] = {"embed": rng.normal(0.0, std, (cfg.vocab_size, d))}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        arrays[p + "attn_norm"] = np.ones(d)
        arrays[p + "wq"] = rng.normal(0.0, std, (d, d))
        arrays[p + "wk"] = rng.normal(0.0, std, (d, d))
        arrays[p + "wv"] = rng.normal(0.0, std, (d, d))
        arrays[p + "wo"] = rng.normal(0.0, resid_std, (d, d))
        arrays[p + "ffn_norm"] = np.ones(d)
        arrays[p + "w_gate"] = rng.normal(0.0, std, (d, f))
        arrays[p + "w_up"] = rng.normal(0.0, std, (d, f))
        arrays[p + "w_down"] = rng.normal(0.0, resid_std, (f, d))
    arrays["final_norm"] = np.ones(d)
    arrays["unembed"] = rng.normal(0.0, std, (d, cfg.vocab_size))
    return ModelParams(cfg, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()})


def reward_model_from(lm: ModelParams) -> ModelParams:
    """Reuse the trunk of ``lm``; drop the unembedding; zero scalar head."""
    arrays = {k: v.copy() for k, v in lm.arrays().items() if k != "unembed"}
    arrays["head.w"] = np.zeros((lm.config.d_model, 1))
    rm = ModelParams(lm.config, {}, kind="rm", meta={})
    return rm.with_arrays(arrays)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def rope_tables(positions, head_dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2:
        raise ConfigError("head dimension must be even for rotary embeddings")
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = pos[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def _rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    # pairs (2i, 2i+1) rotated by the angle for frequency i; x is [..., seq, head_dim]
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return nx._make(out, (x,), backward)


def rope_apply(q, k, positions, base: float = 10000.0) -> tuple[Tensor, Tensor]:
    """Rotate query and key vectors ([..., seq, head_dim]) by their positions."""
    q, k = nx.as_tensor(q), nx.as_tensor(k)
    cos, sin = rope_tables(positions, q.shape[-1], base)
    return _rotate(q, cos, sin), _rotate(k, cos, sin)


def swiglu(x, w_gate, w_up, w_down) -> Tensor:
    return nx.matmul(nx.silu(nx.matmul(x, w_gate)) * nx.matmul(x, w_up), w_down)


def _causal_mask(t: int) -> np.ndarray:
    mask = np.zeros((t, t))
    mask[np.triu_indices(t, k=1)] = -np.inf
    return mask


def _attention(cfg: ModelConfig, w: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    b, t, d = x.shape
    h, hd = cfg.n_heads, cfg.head_dim

    def heads(z: Tensor) -> Tensor:
        return z.reshape(b, t, h, hd).transpose(0, 2, 1, 3)

    q = heads(x @ w[prefix + "wq"])
    k = heads(x @ w[prefix + "wk"])
    v = heads(x @ w[prefix + "wv"])
    q, k = rope_apply(q, k, np.arange(t), cfg.rope_base)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd)) + _causal_mask(t)
    ctx = nx.softmax(scores, axis=-1) @ v
    return ctx.transpose(0, 2, 1, 3).reshape(b, t, d) @ w[prefix + "wo"]


def trunk(params: ModelParams, ids) -> Tensor:
    """Hidden states after the final norm; ids is [seq] or [batch, seq]."""
    cfg, w = params.config, params.tensors
    ids = np.asarray(ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    if ids.shape[1] > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence of length {ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError("token id outside vocabulary")
    x = nx.embedding(w["embed"], ids)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        x = x + _attention(cfg, w, p, nx.rmsnorm(x, w[p + "attn_norm"]))
        x = x + swiglu(nx.rmsnorm(x, w[p + "ffn_norm"]), w[p + "w_gate"], w[p + "w_up"], w[p + "w_down"])
    x = nx.rmsnorm(x, w["final_norm"])
    return x[0] if squeeze else x


def lm_forward(params: ModelParams, ids) -> Tensor:
    """Next-token logits, [seq, vocab] (or [batch, seq, vocab])."""
    if params.kind != "lm":
        raise ConfigError("lm_forward needs a language-model checkpoint")
    return trunk(params, ids) @ params.tensors["unembed"]


def rm_forward(params: ModelParams, ids, lengths=None) -> Tensor:
    """Scalar reward read at the last real token.

    For a batch, ``lengths`` gives each row's unpadded length; the result is [batch].
    """
    if params.kind != "rm":
        raise ConfigError("rm_forward needs a reward-model checkpoint")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[-1] == 0:
        raise ValueError("reward model needs a non-empty sequence")
    h = trunk(params, ids)
    if ids.ndim == 1:
        return (h[ids.shape[0] - 1:] @ params.tensors["head.w"]).reshape(())
    if lengths is None:
        lengths = np.full(ids.shape[0], ids.shape[1])
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths < 1):
        raise ValueError("reward model needs a non-empty sequence")
    last = h[np.arange(ids.shape[0]), lengths - 1]
    return (last @ params.tensors["head.w"]).reshape(ids.shape[0])


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"ORLHFCK\x00"
#   4 bytes   format version (uint32)
#   8 bytes   header length N (uint64)
#   N bytes   UTF-8 JSON header: {"kind", "config", "meta",
#             "tensors": [{"name", "shape", "offset", "nbytes"}, ...]}
#   payload   float64 little-endian row-major tensor data, in header order

MAGIC = b"ORLHFCK\x00"
FORMAT_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> str:
    """Write ``params`` to ``path``; returns the sha256 of the file bytes."""
    names = sorted(params.tensors)
    entries, blobs, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(params.tensors[name].data, dtype="<f8")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"kind": params.kind, "config": asdict(params.config),
                         "meta": params.meta, "tensors": entries}, sort_keys=True).encode()
    raw = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    base = 20 + hlen
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw[start:start + e["nbytes"]], dtype="<f8").reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.float64)
    params = ModelParams(ModelConfig(**header["config"]), {}, header["kind"], header.get("meta", {}))
    return params.with_arrays(arrays)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
