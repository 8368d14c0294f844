"""Common-corruption generator with five severities per kind.

Severity constants are read from ``data/severity_ladders.json``. Every random
draw comes from a Philox stream keyed by ``(seed, image_id, kind, severity)``
so a corrupted image does not depend on processing order.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import SpecError
from .imageio import load_image, save_image
from .rng import generator

log = logging.getLogger(__name__)

NOISE_KINDS = ("gaussian_noise", "shot_noise", "impulse_noise")


@lru_cache(maxsize=None)
def ladders() -> dict:
    text = resources.files("fan").joinpath("data/severity_ladders.json").read_text()
    return json.loads(text)


def kinds() -> tuple:
    return tuple(ladders()["ladders"])


def level(kind: str, severity: int) -> float:
    table = ladders()["ladders"]
    if kind not in table:
        raise SpecError(f"unknown corruption kind {kind!r}; known: {sorted(table)}")
    if not 1 <= severity <= 5:
        raise SpecError(f"severity must be in 1..5, got {severity}")
    return table[kind]["values"][severity - 1]


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        level(self.kind, self.severity)


# ---------------------------------------------------------------- resampling


def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` box-filter resampling weights (rows sum to 1)."""
    step = n_in / n_out
    R = np.zeros((n_out, n_in))
    for o in range(n_out):
        lo, hi = o * step, (o + 1) * step
        for i in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            R[o, i] = min(hi, i + 1) - max(lo, i)
    return R / R.sum(axis=1, keepdims=True)


def area_downsample(img: np.ndarray, h: int, w: int) -> np.ndarray:
    Rh = area_matrix(img.shape[-2], h)
    Rw = area_matrix(img.shape[-1], w)
    return Rh @ img @ Rw.T


def nearest_resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    ih, iw = img.shape[-2:]
    rows = np.minimum(((np.arange(h) + 0.5) * ih / h).astype(int), ih - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * iw / w).astype(int), iw - 1)
    return img[..., rows[:, None], cols[None, :]]


# ---------------------------------------------------------------- kinds


def _saturation_rescale(x: np.ndarray, factor: float) -> np.ndarray:
    # HSV with hue and value fixed: every channel moves linearly in S
    v = x.max(axis=0, keepdims=True)
    mn = x.min(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(v > 0, (v - mn) / v, 0.0)
        s_new = np.minimum(s * factor, 1.0)
        ratio = np.where(s > 0, s_new / s, 0.0)
    return v - (v - x) * ratio


def _brightness(x: np.ndarray, delta: float) -> np.ndarray:
    if x.shape[0] != 3:
        return x + delta
    v = x.max(axis=0, keepdims=True)
    v_new = np.minimum(v + delta, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(v > 0, x * (v_new / v), v_new)
    return scaled


def corrupt(image: np.ndarray, spec: CorruptionSpec, image_id: int | str = 0) -> np.ndarray:
    """Apply one corruption to a ``(C, H, W)`` image in ``[0, 1]``."""
    x = np.asarray(image, dtype=np.float64)
    c = level(spec.kind, spec.severity)
    rng = generator(spec.seed, image_id, spec.kind, spec.severity)
    k = spec.kind
    if k == "gaussian_noise":
        out = x + c * rng.standard_normal(x.shape)
    elif k == "shot_noise":
        out = rng.poisson(np.clip(x, 0, 1) * c) / c
    elif k == "impulse_noise":
        u = rng.random(x.shape)
        salt = rng.random(x.shape) < 0.5
        out = np.where(u < c, salt.astype(np.float64), x)
    elif k == "speckle_noise":
        out = x + x * c * rng.standard_normal(x.shape)
    elif k == "gaussian_blur":
        out = gaussian_filter(x, sigma=(0, c, c), mode="reflect")
    elif k == "contrast":
        means = x.mean(axis=(1, 2), keepdims=True)
        out = (x - means) * c + means
    elif k == "brightness":
        out = _brightness(x, c)
    elif k == "saturate":
        out = _saturation_rescale(x, c) if x.shape[0] == 3 else x
    elif k == "pixelate":
        h, w = x.shape[-2:]
        small = area_downsample(x, max(1, round(h * c)), max(1, round(w * c)))
        out = nearest_resize(small, h, w)
    else:  # pragma: no cover - level() rejects unknown kinds first
        raise SpecError(k)
    return np.clip(out, 0.0, 1.0).astype(np.asarray(image).dtype, copy=False)


def corrupt_batch(images: np.ndarray, spec: CorruptionSpec, ids=None) -> np.ndarray:
    ids = range(len(images)) if ids is None else ids
    return np.stack([corrupt(img, spec, i) for img, i in zip(images, ids)])


# ---------------------------------------------------------------- suites


def corruption_suite(dataset, kinds_, severities=(1, 2, 3, 4, 5), seed: int = 0,
                     out_dir=None, ext: str = ".fant") -> dict:
    """Corrupt every image under every ``(kind, severity)``.

    ``dataset`` is a sequence of arrays or image paths. With ``out_dir`` the
    outputs are written there and listed in ``manifest.json``; read or write
    failures are recorded per file and the suite carries on.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    entries, errors, arrays = [], [], {}
    for image_id, item in enumerate(dataset):
        source = str(item) if isinstance(item, (str, Path)) else f"array:{image_id}"
        try:
            img = load_image(item) if isinstance(item, (str, Path)) else np.asarray(item)
        except (OSError, ValueError) as exc:
            errors.append({"image_id": image_id, "source": source, "error": str(exc)})
            log.warning("skipping %s: %s", source, exc)
            continue
        for kind in kinds_:
            for sev in severities:
                spec = CorruptionSpec(kind, sev, seed)
                res = corrupt(img, spec, image_id)
                entry = {"image_id": image_id, "source": source, "kind": kind,
                         "severity": sev, "seed": seed, "level": level(kind, sev)}
                if out is None:
                    arrays[(image_id, kind, sev)] = res
                else:
                    path = out / f"{image_id:05d}_{kind}_s{sev}{ext}"
                    try:
                        save_image(path, res)
                        entry["path"] = path.name
                        entry["sha256"] = hashlib.sha256(path.read_bytes()).hexdigest()
                    except OSError as exc:
                        errors.append({"image_id": image_id, "kind": kind, "severity": sev,
                                       "error": str(exc)})
                        continue
                entries.append(entry)
    manifest = {"ladder_version": ladders()["version"], "seed": seed, "entries": entries,
                "errors": errors}
    if out is not None:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    else:
        manifest["arrays"] = arrays
    return manifest
