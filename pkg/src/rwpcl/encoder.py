"""Compact pre-norm transformer encoder with a CLS classification head.

``forward`` consumes a packed batch (ids + attention mask) and returns the
final-layer CLS representation together with class logits from a single
affine head. Padded positions are excluded from attention by a large
negative additive mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore
from .errors import ConfigError, InputError
from .numcore import Tensor

_NEG_MASK = 1e9  # additive pre-softmax penalty for padded key positions


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    max_len: int
    num_classes: int
    layers: int = 2
    model_dim: int = 64
    heads: int = 2
    ff_dim: int = 128

    def __post_init__(self):
        for field in ("vocab_size", "max_len", "num_classes", "layers", "model_dim", "heads", "ff_dim"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"EncoderConfig.{field} must be positive, got {getattr(self, field)}")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")


def parameter_shapes(cfg: EncoderConfig) -> dict[str, tuple]:
    """Name -> shape map of every trainable tensor (deterministic order by name)."""
    shapes = {
        "embed.token": (cfg.vocab_size, cfg.model_dim),
        "embed.position": (cfg.max_len, cfg.model_dim),
        "final_norm.gamma": (cfg.model_dim,),
        "final_norm.beta": (cfg.model_dim,),
        "classifier.weight": (cfg.model_dim, cfg.num_classes),
        "classifier.bias": (cfg.num_classes,),
    }
    d, f = cfg.model_dim, cfg.ff_dim
    for i in range(cfg.layers):
        p = f"layer{i:02d}"
        shapes.update({
            f"{p}.attn.wq": (d, d), f"{p}.attn.bq": (d,),
            f"{p}.attn.wk": (d, d), f"{p}.attn.bk": (d,),
            f"{p}.attn.wv": (d, d), f"{p}.attn.bv": (d,),
            f"{p}.attn.wo": (d, d), f"{p}.attn.bo": (d,),
            f"{p}.norm1.gamma": (d,), f"{p}.norm1.beta": (d,),
            f"{p}.norm2.gamma": (d,), f"{p}.norm2.beta": (d,),
            f"{p}.ffn.w1": (d, f), f"{p}.ffn.b1": (f,),
            f"{p}.ffn.w2": (f, d), f"{p}.ffn.b2": (d,),
        })
    return dict(sorted(shapes.items()))


def glorot_limit(shape) -> float:
    fan_in, fan_out = shape[0], shape[-1]
    return math.sqrt(6.0 / (fan_in + fan_out))


def init(cfg: EncoderConfig, seed: int) -> dict[str, Tensor]:
    """Fresh parameters: Glorot-uniform weights, zero biases/shifts, unit scales."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            data = np.ones(shape, dtype=np.float32)
        elif leaf in ("beta",) or leaf.startswith("b"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            limit = glorot_limit(shape)
            data = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def _affine_norm(x, gamma, beta):
    return numcore.add(numcore.mul(numcore.layernorm_rows(x), gamma), beta)


def _split_heads(x, b, t, heads, dh):
    return numcore.transpose(numcore.reshape(x, (b, t, heads, dh)), (0, 2, 1, 3))


def _attention(cfg, params, x, mask_add, prefix, attn_sink=None):
    b, t, d = x.shape
    heads, dh = cfg.heads, cfg.model_dim // cfg.heads
    q = _split_heads(numcore.add(numcore.matmul(x, params[f"{prefix}.attn.wq"]), params[f"{prefix}.attn.bq"]), b, t, heads, dh)
    k = _split_heads(numcore.add(numcore.matmul(x, params[f"{prefix}.attn.wk"]), params[f"{prefix}.attn.bk"]), b, t, heads, dh)
    v = _split_heads(numcore.add(numcore.matmul(x, params[f"{prefix}.attn.wv"]), params[f"{prefix}.attn.bv"]), b, t, heads, dh)
    scores = numcore.affine(numcore.matmul(q, numcore.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh), 0.0)
    probs = numcore.softmax_rows(numcore.add(scores, mask_add))
    if attn_sink is not None:
        attn_sink.append(probs.data)
    ctx = numcore.reshape(numcore.transpose(numcore.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
    return numcore.add(numcore.matmul(ctx, params[f"{prefix}.attn.wo"]), params[f"{prefix}.attn.bo"])


def forward(cfg: EncoderConfig, params: dict[str, Tensor], batch, attn_sink=None):
    """Run the encoder; returns (cls [b, d], logits [b, C]).

    ``batch`` needs integer ``ids`` [b, t] and a 0/1 ``mask`` [b, t]. Pass a
    list as ``attn_sink`` to collect per-layer attention weight arrays.
    """
    ids = np.asarray(batch.ids)
    b, t = ids.shape
    if t > cfg.max_len:
        raise InputError(f"sequence length {t} exceeds configured max_len {cfg.max_len}")
    for row in range(b):
        bad = ids[row][ids[row] >= cfg.vocab_size]
        if bad.size:
            raise InputError(f"token id {int(bad[0])} out of range (vocab_size {cfg.vocab_size}) in example {row}")
    dtype = params["embed.token"].dtype
    mask = np.asarray(batch.mask, dtype=dtype)
    mask_add = Tensor(np.broadcast_to((mask - 1.0)[:, None, None, :] * _NEG_MASK,
                                      (b, cfg.heads, t, t)).astype(dtype), dtype=dtype)

    x = numcore.add(numcore.embedding(params["embed.token"], ids),
                    numcore.embedding(params["embed.position"], np.arange(t)))
    for i in range(cfg.layers):
        p = f"layer{i:02d}"
        h = _affine_norm(x, params[f"{p}.norm1.gamma"], params[f"{p}.norm1.beta"])
        x = numcore.add(x, _attention(cfg, params, h, mask_add, p, attn_sink))
        h = _affine_norm(x, params[f"{p}.norm2.gamma"], params[f"{p}.norm2.beta"])
        h = numcore.matmul(numcore.relu(numcore.add(numcore.matmul(h, params[f"{p}.ffn.w1"]),
                                                    params[f"{p}.ffn.b1"])), params[f"{p}.ffn.w2"])
        x = numcore.add(x, numcore.add(h, params[f"{p}.ffn.b2"]))
    x = _affine_norm(x, params["final_norm.gamma"], params["final_norm.beta"])
    cls = numcore.select_token(x, 0)
    logits = numcore.add(numcore.matmul(cls, params["classifier.weight"]), params["classifier.bias"])
    return cls, logits


def predict_proba(cfg: EncoderConfig, params: dict[str, Tensor], batch) -> np.ndarray:
    """Class probabilities (softmax over logits) as a plain array."""
    _, logits = forward(cfg, params, batch)
    return numcore.softmax_rows(logits).data
