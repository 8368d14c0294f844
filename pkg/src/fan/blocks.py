"""Token self-attention, MLP, channel attention and the assembled models.

Token matrices are laid out ``(..., d, n)`` (channels x tokens); a leading
batch axis is optional everywhere. Parameters live in flat ``name -> array``
dicts so the autodiff tape and the checkpoint writer can share one registry.
Block functions accept Vars or plain arrays and return Vars.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ConfigError, DimensionError

BLOCK_KINDS = ("vit", "fan-ca", "fan-eca")

# depth, channel dim, heads, reported params, reported FLOPs
TABLE1 = {
    "FAN-T": dict(depth=12, dim=192, heads=4, params="7.3M", flops="1.4G"),
    "FAN-S": dict(depth=12, dim=384, heads=8, params="28.3M", flops="5.3G"),
    "FAN-B": dict(depth=18, dim=448, heads=8, params="54.0M", flops="10.4G"),
    "FAN-L": dict(depth=24, dim=480, heads=10, params="80.5M", flops="15.8G"),
}


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    patch: int = 8
    mlp_ratio: int = 2
    kind: str = "fan-eca"
    num_classes: int = 4
    image_size: int = 32
    in_chans: int = 3
    # fixed input standardization applied before the patch projection
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}; expected one of {BLOCK_KINDS}")
        if self.depth < 0 or self.dim < 1 or self.heads < 1:
            raise ConfigError("depth must be >= 0, dim and heads >= 1")
        if self.dim % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide dim={self.dim}")
        if self.patch < 1 or self.image_size % self.patch:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch}"
            )
        if self.mlp_ratio < 1 or int(self.mlp_ratio) != self.mlp_ratio:
            raise ConfigError("mlp_ratio must be a positive integer")
        if not self.pixel_std > 0:
            raise ConfigError("pixel_std must be positive")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_table(cls, name: str, **overrides) -> "ModelConfig":
        try:
            row = TABLE1[name]
        except KeyError:
            raise ConfigError(f"unknown variant {name!r}; known: {sorted(TABLE1)}") from None
        base = dict(depth=row["depth"], dim=row["dim"], heads=row["heads"], patch=16,
                    mlp_ratio=4, image_size=224, num_classes=1000)
        base.update(overrides)
        return cls(**base)


def sub(params: dict, prefix: str) -> dict:
    """Parameters under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


# ---------------------------------------------------------------- sub-blocks


def self_attention(x, p: dict, heads: int = 1, cache: dict | None = None) -> Var:
    """Multi-head token self-attention.

    Per head: ``softmax(q_i . k_j / sqrt(d_head))`` over keys ``j``, values
    aggregated with those weights; heads are concatenated along channels and
    mixed by ``W_L^T`` (so ``Z^T = A V^T W_L`` for one head).
    """
    x = ad.as_var(x)
    d, n = x.shape[-2:]
    if d % heads:
        raise ConfigError(f"heads={heads} does not divide d={d}")
    for key in ("wq", "wk", "wv", "wl"):
        if ad.as_var(p[key]).shape != (d, d):
            raise DimensionError(f"self_attention: {key} has shape {ad.as_var(p[key]).shape}, expected {(d, d)}")
    dh = d // heads
    lead = x.shape[:-2]
    split = lead + (heads, dh, n)
    q = ad.reshape(ad.matmul(p["wq"], x), split)
    k = ad.reshape(ad.matmul(p["wk"], x), split)
    v = ad.reshape(ad.matmul(p["wv"], x), split)
    scores = ad.scale(ad.matmul(ad.transpose(q), k), 1.0 / math.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    if cache is not None:
        cache["attn"] = attn.data
    out = ad.reshape(ad.matmul(v, ad.transpose(attn)), lead + (d, n))
    return ad.matmul(ad.transpose(p["wl"]), out)


def mlp(z, p: dict) -> Var:
    """Per-token ``W2 gelu(W1 z + b1) + b2``."""
    h = ad.gelu(ad.add_bias(ad.matmul(p["w1"], z), p["b1"]))
    return ad.add_bias(ad.matmul(p["w2"], h), p["b2"])


def channel_attention(z, p: dict, cache: dict | None = None) -> Var:
    """``softmax((W'_Q Z)(W'_K Z)^T / sqrt(n)) MLP(Z)``; a d x d attention."""
    z = ad.as_var(z)
    n = z.shape[-1]
    q = ad.matmul(p["wq"], z)
    k = ad.matmul(p["wk"], z)
    attn = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(n)), axis=-1)
    if cache is not None:
        cache["attn"] = attn.data
    return ad.matmul(attn, mlp(z, p))


def efficient_channel_attention(z, p: dict, cache: dict | None = None) -> Var:
    """Per-channel sigmoid gate against the token prototype, times MLP(Z).

    The gate is ``sigmoid(W'_Q softmax_tok(Z) softmax_tok(mean_ch(Z))^T / sqrt(n))``
    of shape ``(d, 1)``. The prototype contraction is done before applying
    ``W'_Q`` so the token-dependent work stays linear in d.
    """
    z = ad.as_var(z)
    n = z.shape[-1]
    tok = ad.softmax(z, axis=-1)
    proto = ad.softmax(ad.mean(z, axis=-2), axis=-1)
    corr = ad.matmul(tok, ad.transpose(proto))
    gate = ad.sigmoid(ad.scale(ad.matmul(p["wq"], corr), 1.0 / math.sqrt(n)))
    if cache is not None:
        cache["gate"] = gate.data
    return ad.broadcast_mul(mlp(z, p), gate)


def _ln(x, p: dict, name: str) -> Var:
    return ad.layer_norm(x, p[name + ".g"], p[name + ".b"], axis=-2)


def vit_block(x, p: dict, heads: int, cache: dict | None = None) -> Var:
    if any(k.startswith(("ca.", "eca.")) for k in p):
        raise ConfigError("vit block given channel-attention parameters")
    x = ad.as_var(x)
    z = ad.add(x, self_attention(_ln(x, p, "norm1"), sub(p, "attn"), heads, cache))
    return ad.add(z, mlp(_ln(z, p, "norm2"), sub(p, "mlp")))


def fan_block(x, p: dict, heads: int, kind: str, cache: dict | None = None) -> Var:
    """Token self-attention then CA or ECA channel processing, both residual."""
    if kind == "vit":
        raise ConfigError("fan_block needs kind 'fan-ca' or 'fan-eca'; use vit_block for 'vit'")
    x = ad.as_var(x)
    z = ad.add(x, self_attention(_ln(x, p, "norm1"), sub(p, "attn"), heads, cache))
    zn = _ln(z, p, "norm2")
    if kind == "fan-ca":
        ch = channel_attention(zn, sub(p, "ca"))
    elif kind == "fan-eca":
        ch = efficient_channel_attention(zn, sub(p, "eca"))
    else:
        raise ConfigError(f"unknown block kind {kind!r}")
    return ad.add(z, ch)


def block(x, p: dict, cfg: ModelConfig) -> Var:
    if cfg.kind == "vit":
        return vit_block(x, p, cfg.heads)
    return fan_block(x, p, cfg.heads, cfg.kind)


# ---------------------------------------------------------------- embedding


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """``(..., C, H, W)`` -> ``(..., C*p*p, n)``; tokens row-major over the grid."""
    *lead, c, h, w = images.shape
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(*lead, c, gh, p, gw, p)
    nl = len(lead)
    # -> (..., c, py, px, gh, gw)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 4, nl + 1, nl + 3)
    return x.reshape(*lead, c * p * p, gh * gw)


def patch_embed(images, p: int, params: dict, mean: float = 0.0, std: float = 1.0) -> Var:
    """Linear patch embedding plus bias and learned positional embedding.

    Pixels are standardized as ``(x - mean) / std`` first.
    """
    x = np.asarray(images.data if isinstance(images, Var) else images)
    if mean != 0.0 or std != 1.0:
        x = (x - float(mean)) / float(std)
    patches = patchify(x, p)
    tokens = ad.add_bias(ad.matmul(params["w"], patches), params["b"])
    return ad.broadcast_add(tokens, params["pos"])


# ---------------------------------------------------------------- model


def _trunc_normal(rng, shape, std=0.02):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def _mlp_params(rng, d, r):
    return {
        "w1": _trunc_normal(rng, (r * d, d)),
        "b1": np.zeros(r * d),
        "w2": _trunc_normal(rng, (d, r * d)),
        "b2": np.zeros(d),
    }


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> dict:
    """Truncated-normal (std 0.02) weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    d, n = cfg.dim, cfg.num_tokens
    out = {
        "embed.w": _trunc_normal(rng, (d, cfg.in_chans * cfg.patch**2)),
        "embed.b": np.zeros(d),
        "embed.pos": _trunc_normal(rng, (d, n)),
    }
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        out[pre + "norm1.g"] = np.ones(d)
        out[pre + "norm1.b"] = np.zeros(d)
        for key in ("wq", "wk", "wv", "wl"):
            out[pre + "attn." + key] = _trunc_normal(rng, (d, d))
        out[pre + "norm2.g"] = np.ones(d)
        out[pre + "norm2.b"] = np.zeros(d)
        if cfg.kind == "vit":
            ch = "mlp."
            extra = {}
        elif cfg.kind == "fan-ca":
            ch = "ca."
            extra = {"wq": _trunc_normal(rng, (d, d)), "wk": _trunc_normal(rng, (d, d))}
        else:
            ch = "eca."
            extra = {"wq": _trunc_normal(rng, (d, d))}
        for key, val in {**extra, **_mlp_params(rng, d, cfg.mlp_ratio)}.items():
            out[pre + ch + key] = val
    out["norm.g"] = np.ones(d)
    out["norm.b"] = np.zeros(d)
    out["head.w"] = _trunc_normal(rng, (cfg.num_classes, d))
    out["head.b"] = np.zeros(cfg.num_classes)
    return {k: np.asarray(v, dtype=dtype) for k, v in out.items()}


def forward_tokens(images, params: dict, cfg: ModelConfig) -> list:
    """Embedded tokens followed by every block output (``depth + 1`` Vars)."""
    x = patch_embed(images, cfg.patch, sub(params, "embed"), cfg.pixel_mean, cfg.pixel_std)
    outs = [x]
    for i in range(cfg.depth):
        x = block(x, sub(params, f"blocks.{i}"), cfg)
        outs.append(x)
    return outs


def classify_tokens(x, params: dict) -> Var:
    """Final LN, mean-pool over tokens, linear head -> ``(..., K)`` logits."""
    x = ad.layer_norm(x, params["norm.g"], params["norm.b"], axis=-2)
    pooled = ad.mean(x, axis=-1)  # (..., d, 1)
    logits = ad.add_bias(ad.matmul(params["head.w"], pooled), params["head.b"])
    return ad.reshape(logits, logits.shape[:-1])


def forward_classify(images, params: dict, cfg: ModelConfig) -> Var:
    return classify_tokens(forward_tokens(images, params, cfg)[-1], params)


def predict(images: np.ndarray, params: dict, cfg: ModelConfig, batch: int = 256) -> np.ndarray:
    """Logits for a stack of images, evaluated in fixed-size chunks."""
    outs = [
        forward_classify(images[i:i + batch], params, cfg).data
        for i in range(0, len(images), batch)
    ]
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------- flop model


@dataclass
class FlopReport:
    """Per-image operation counts, one entry per sub-block.

    A multiply-add counts 2; exp, division, erf and similar count 1 each
    per element, with fixed small multipliers for composite functions.
    """

    config: dict
    per_block: dict = field(default_factory=dict)
    other: dict = field(default_factory=dict)

    @property
    def block_total(self) -> int:
        return sum(self.per_block.values())

    @property
    def total(self) -> int:
        return self.block_total * self.config["depth"] + sum(self.other.values())


def _softmax_flops(rows: int, length: int) -> int:
    return 3 * rows * length  # exp, accumulate, divide


def count_flops(cfg: ModelConfig) -> FlopReport:
    d, n, h, r = cfg.dim, cfg.num_tokens, cfg.heads, cfg.mlp_ratio
    blk = {
        "layer_norm": 2 * 7 * d * n,
        "sa_projections": 4 * 2 * d * d * n,
        "sa_attention": 2 * n * n * d + h * n * n + _softmax_flops(h * n, n) + 2 * n * n * d,
        "residual": 2 * d * n,
        # fc1 + bias + erf-gelu (~8/elt) + fc2 + bias
        "mlp": 2 * r * d * d * n + r * d * n + 8 * r * d * n + 2 * r * d * d * n + d * n,
    }
    if cfg.kind == "fan-ca":
        blk["ca_mixing"] = (
            2 * (2 * d * d * n)          # W'_Q Z, W'_K Z
            + 2 * d * d * n              # channel scores
            + d * d                      # 1/sqrt(n) scaling
            + _softmax_flops(d, d)
            + 2 * d * d * n              # attention applied to MLP(Z)
        )
    elif cfg.kind == "fan-eca":
        blk["eca_gate"] = (
            d * n                        # channel mean for the prototype
            + _softmax_flops(d, n)       # softmax over tokens of Z
            + 2 * d * n                  # correlation with the prototype
            + d                          # 1/sqrt(n) scaling
            + 4 * d                      # sigmoid
            + d * n                      # channel re-weighting
        )
        blk["eca_prototype"] = _softmax_flops(1, n)
        blk["eca_projection"] = 2 * d * d
    other = {
        "input_norm": 2 * cfg.in_chans * cfg.image_size**2,
        "patch_embed": 2 * d * cfg.in_chans * cfg.patch**2 * n + 2 * d * n,
        "final_norm": 7 * d * n,
        "pool": d * n,
        "head": 2 * cfg.num_classes * d + cfg.num_classes,
    }
    return FlopReport(cfg.to_dict(), blk, other)
