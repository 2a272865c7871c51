"""Toy transformer encoders standing in for the teacher and student models."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from hetdistill import tensor as T
from hetdistill.ecg import N_CLASSES, PatchTokenizerConfig
from hetdistill.errors import DimensionError, InputError
from hetdistill.mhca import attention
from hetdistill.tensor import Tensor

LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    tokenizer: PatchTokenizerConfig
    width: int
    blocks: int
    heads: int = 4
    pool: int = 4
    ffn_mult: int = 2
    n_classes: int = N_CLASSES
    n_leads: int = 12
    n_samples: int = 500

    def __post_init__(self):
        if self.width % self.heads:
            raise InputError(f"width {self.width} is not divisible by {self.heads} heads")
        per_lead = self.tokenizer.windows_per_lead(self.n_samples)
        if per_lead % self.pool:
            raise InputError(f"{per_lead} windows per lead is not divisible by pool {self.pool}")

    @property
    def token_count(self) -> int:
        return self.tokenizer.token_count(self.n_leads, self.n_samples)

    @property
    def length(self) -> int:
        return self.token_count // self.pool

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"unknown encoder config keys: {', '.join(unknown)}")
        tok = data.pop("tokenizer")
        if isinstance(tok, dict):
            tok = PatchTokenizerConfig(**tok)
        return cls(tokenizer=tok, **data)


def teacher_config() -> EncoderConfig:
    return EncoderConfig(tokenizer=PatchTokenizerConfig(patch_length=25, stride=25, embed_width=32, seed=11),
                         width=96, blocks=4, heads=4, pool=4)


def student_config() -> EncoderConfig:
    return EncoderConfig(tokenizer=PatchTokenizerConfig(patch_length=50, stride=50, embed_width=48, seed=12),
                         width=48, blocks=2, heads=4, pool=5)


def uniform_init(rng, fan_in: int, shape, dtype=np.float64) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def standardize(x: Tensor) -> Tensor:
    """Zero mean, unit variance over the last axis."""
    centred = x - x.mean(axis=-1, keepdims=True)
    var = (centred * centred).mean(axis=-1, keepdims=True)
    return centred / T.sqrt(var + LN_EPS)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return standardize(x) * gamma + beta


@dataclass
class EncoderOutput:
    visual: Tensor  # (B, V, D) embedded patch tokens, before positions and pooling
    hidden: Tensor  # (B, L, D) last-block output, every token scaled to unit norm
    logits: Tensor  # (B, K)


class ToyEncoder:
    """Patch embedding, mean pooling, pre-norm transformer blocks, linear head.

    Parameters live in ``self.params`` as an ordered ``{name: Tensor}`` dict.
    The final norm has no gain or bias: the linear head absorbs both, and a
    fixed token scale keeps feature-matching losses from being satisfied by
    shrinking the hidden states. The head reads the standardized states; the
    exposed ``hidden`` states are the same tokens divided by ``sqrt(D)``, so
    each has unit norm like the visual tokens that enter optimal transport.
    """

    def __init__(self, cfg: EncoderConfig, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        D, V, Dtok = cfg.width, cfg.token_count, cfg.tokenizer.embed_width
        F = cfg.ffn_mult * D
        shapes = {
            "embed.w": ((Dtok, D), Dtok),
            "embed.b": ((D,), None),
            "pos": ((V, D), "pos"),
        }
        for i in range(cfg.blocks):
            p = f"block{i}."
            shapes.update({
                p + "ln1.g": ((D,), "one"), p + "ln1.b": ((D,), None),
                p + "attn.wq": ((D, D), D), p + "attn.wk": ((D, D), D),
                p + "attn.wv": ((D, D), D), p + "attn.wo": ((D, D), D),
                p + "ln2.g": ((D,), "one"), p + "ln2.b": ((D,), None),
                p + "ffn.w1": ((D, F), D), p + "ffn.b1": ((F,), None),
                p + "ffn.w2": ((F, D), F), p + "ffn.b2": ((D,), None),
            })
        shapes.update({
            "head.w": ((D, cfg.n_classes), D), "head.b": ((cfg.n_classes,), None),
        })
        self.params = {}
        for name, (shape, init) in shapes.items():
            if init is None:
                arr = np.zeros(shape, dtype=dtype)
            elif init == "one":
                arr = np.ones(shape, dtype=dtype)
            elif init == "pos":
                arr = (0.02 * rng.standard_normal(shape)).astype(dtype)
            else:
                arr = uniform_init(rng, init, shape, dtype)
            self.params[name] = Tensor(arr, requires_grad=True)

    @property
    def width(self) -> int:
        return self.cfg.width

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise InputError(f"state is missing parameters: {sorted(missing)}")
        for name, param in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != param.shape:
                raise DimensionError(f"{name}: expected {param.shape}, got {arr.shape}")
            param.data = arr.astype(param.dtype, copy=True)

    def embed(self, tokens) -> Tensor:
        P = self.params
        x = T.as_tensor(tokens)
        if x.ndim != 3 or x.shape[1:] != (self.cfg.token_count, self.cfg.tokenizer.embed_width):
            raise DimensionError(
                f"expected tokens (B, {self.cfg.token_count}, {self.cfg.tokenizer.embed_width}), got {x.shape}")
        return x @ P["embed.w"] + P["embed.b"]

    def forward(self, tokens) -> EncoderOutput:
        P, cfg = self.params, self.cfg
        visual = self.embed(tokens)
        B = visual.shape[0]
        x = (visual + P["pos"]).reshape(B, cfg.length, cfg.pool, cfg.width).mean(axis=2)
        for i in range(cfg.blocks):
            p = f"block{i}."
            h = layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            att, _ = attention(h, h, P[p + "attn.wq"], P[p + "attn.wk"], P[p + "attn.wv"],
                               P[p + "attn.wo"], cfg.heads)
            x = x + att
            h = layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            x = x + T.relu(h @ P[p + "ffn.w1"] + P[p + "ffn.b1"]) @ P[p + "ffn.w2"] + P[p + "ffn.b2"]
        normed = standardize(x)
        logits = normed.mean(axis=1) @ P["head.w"] + P["head.b"]
        hidden = normed * (1.0 / math.sqrt(cfg.width))
        return EncoderOutput(visual=visual, hidden=hidden, logits=logits)

    __call__ = forward


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy over all label bits."""
    z = T.as_tensor(logits)
    y = np.asarray(targets, dtype=z.dtype)
    if z.shape != y.shape:
        raise DimensionError(f"logits {z.shape} vs targets {y.shape}")
    return (T.softplus(z) - z * T.Tensor(y)).mean()


def sigmoid(x: np.ndarray) -> np.ndarray:
    return T._sigmoid(np.asarray(x))
