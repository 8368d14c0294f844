"""Random parameter builders shared by the test modules."""

import numpy as np


def sa_params(rng, d, scale=0.5):
    return {k: rng.standard_normal((d, d)) * scale for k in ("wq", "wk", "wv", "wl")}


def mlp_params(rng, d, r=2, scale=0.5):
    return {
        "w1": rng.standard_normal((r * d, d)) * scale,
        "b1": rng.standard_normal(r * d) * scale,
        "w2": rng.standard_normal((d, r * d)) * scale,
        "b2": rng.standard_normal(d) * scale,
    }


def ca_params(rng, d, r=2, scale=0.5):
    return {"wq": rng.standard_normal((d, d)) * scale,
            "wk": rng.standard_normal((d, d)) * scale, **mlp_params(rng, d, r, scale)}


def eca_params(rng, d, r=2, scale=0.5):
    return {"wq": rng.standard_normal((d, d)) * scale, **mlp_params(rng, d, r, scale)}


def block_params(rng, d, kind, r=2, scale=0.5):
    p = {"norm1.g": 1 + 0.1 * rng.standard_normal(d), "norm1.b": 0.1 * rng.standard_normal(d),
         "norm2.g": 1 + 0.1 * rng.standard_normal(d), "norm2.b": 0.1 * rng.standard_normal(d)}
    p.update({"attn." + k: v for k, v in sa_params(rng, d, scale).items()})
    ch = {"vit": ("mlp", mlp_params), "fan-ca": ("ca", ca_params), "fan-eca": ("eca", eca_params)}
    prefix, build = ch[kind]
    p.update({f"{prefix}.{k}": v for k, v in build(rng, d, r, scale).items()})
    return p


def perturbed(params, rng, scale=0.3):
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in params.items()}
