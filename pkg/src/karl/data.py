"""Dataset ingestion and the synthetic complexity suite.

Synthetic families span the structure spectrum used by the analysis
probes: constant (one value), gradient (smooth ramp), checkerboard
(redundant high-frequency structure), noise (incompressible), mandelbrot
(structured but deep). Every image is generated from its own
``SeedSequence((seed, split, family, index))`` stream, so datasets are
bit-reproducible and splits are disjoint by construction.
"""

import dataclasses
import logging
import os

import numpy as np

from . import kernels
from .config import SYNTH_KINDS
from .errors import DataError, InputError

log = logging.getLogger(__name__)

_SPLIT_CODE = {"train": 0, "val": 1}

# fixed base viewport; per-image jitter stays inside the interesting region
_MANDEL_VIEW = (-2.0, 0.7, -1.2, 1.2)
_MANDEL_MAX_ITER = 64


@dataclasses.dataclass
class Image:
    pixels: np.ndarray  # (H, W, C), float64 in [0, 1]
    id: str
    kind: str = ""


@dataclasses.dataclass
class DatasetSpec:
    source: str  # synthetic | folder
    split: str  # train | val
    resolution: int
    seed: int
    size: int
    channels: int = 3
    path: str = ""


def _rng_for(spec, family_idx, i):
    code = _SPLIT_CODE.get(spec.split)
    if code is None:
        raise InputError(f"unknown split {spec.split!r}")
    return np.random.default_rng(
        np.random.SeedSequence((spec.seed, code, family_idx, i))
    )


def _constant(rng, res, ch):
    v = rng.uniform(0.05, 0.95)
    return np.full((res, res, ch), v)


def _gradient(rng, res, ch):
    theta = rng.uniform(0.0, 2.0 * np.pi)
    y, x = np.mgrid[0:res, 0:res] / (res - 1)
    proj = np.cos(theta) * x + np.sin(theta) * y
    ramp = (proj - proj.min()) / (proj.max() - proj.min())
    lo = rng.uniform(0.0, 0.4, size=ch)
    hi = rng.uniform(0.6, 1.0, size=ch)
    return lo[None, None, :] + ramp[:, :, None] * (hi - lo)[None, None, :]


def _checkerboard(rng, res, ch):
    cell = int(rng.choice([2, 4, 8]))
    v0 = rng.uniform(0.0, 1.0)
    v1 = rng.uniform(0.0, 1.0)
    if abs(v1 - v0) < 0.2:  # keep the two values clearly distinct
        v1 = (v0 + 0.5) % 1.0
    oy, ox = rng.integers(0, cell, size=2)
    y, x = np.mgrid[0:res, 0:res]
    board = (((y + oy) // cell) + ((x + ox) // cell)) % 2
    img = np.where(board == 0, v0, v1)
    return np.repeat(img[:, :, None], ch, axis=2)


def _noise(rng, res, ch):
    return rng.uniform(0.0, 1.0, size=(res, res, ch))


def _mandelbrot(rng, res, ch):
    re0, re1, im0, im1 = _MANDEL_VIEW
    cx = 0.5 * (re0 + re1) + rng.uniform(-0.15, 0.15)
    cy = 0.5 * (im0 + im1) + rng.uniform(-0.15, 0.15)
    zoom = rng.uniform(1.0, 4.0)
    hw = 0.5 * (re1 - re0) / zoom
    hh = 0.5 * (im1 - im0) / zoom
    field = kernels.mandelbrot_escape(
        cx - hw, cx + hw, cy - hh, cy + hh, res, res, _MANDEL_MAX_ITER
    )
    return np.repeat(field[:, :, None], ch, axis=2)


_FAMILIES = {
    "constant": _constant,
    "gradient": _gradient,
    "checkerboard": _checkerboard,
    "noise": _noise,
    "mandelbrot": _mandelbrot,
}


def make_synthetic(kind, spec):
    """Generate spec.size images of one family."""
    if kind not in _FAMILIES:
        raise InputError(f"unknown synthetic kind {kind!r}")
    fam_idx = SYNTH_KINDS.index(kind)
    gen = _FAMILIES[kind]
    out = []
    for i in range(spec.size):
        rng = _rng_for(spec, fam_idx, i)
        px = np.clip(gen(rng, spec.resolution, spec.channels), 0.0, 1.0)
        out.append(Image(px, f"{kind}-{spec.split}-{i:05d}", kind))
    return out


def make_mixed(spec, weights):
    """Mixture over all families with sizes proportional to weights."""
    w = np.asarray(weights, dtype=np.float64)
    raw = w / w.sum() * spec.size
    counts = np.floor(raw).astype(int)
    # distribute the rounding remainder to the largest fractional parts
    order = np.argsort(-(raw - counts))
    for j in range(spec.size - counts.sum()):
        counts[order[j % len(counts)]] += 1
    out = []
    for kind, n in zip(SYNTH_KINDS, counts):
        sub = dataclasses.replace(spec, size=int(n))
        out.extend(make_synthetic(kind, sub))
    return out


def load_folder(path, spec):
    """Load raster images from a folder: center crop, resize, scale to [0,1].

    Filenames sort the corpus; a seeded permutation assigns the val split
    from the front and the train split from the back, so the two are
    disjoint for any sizes that fit.
    """
    from PIL import Image as PILImage

    if not os.path.isdir(path):
        raise DataError(f"dataset folder not found: {path}")
    names = sorted(
        n for n in os.listdir(path)
        if n.lower().endswith((".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"))
    )
    if not names:
        raise DataError(f"no images in {path}")
    perm = np.random.default_rng(spec.seed).permutation(len(names))
    if spec.split == "val":
        chosen = perm[: spec.size]
    else:
        chosen = perm[::-1][: spec.size]
    out = []
    for j in chosen:
        name = names[j]
        try:
            with PILImage.open(os.path.join(path, name)) as im:
                im = im.convert("RGB" if spec.channels == 3 else "L")
                w, h = im.size
                side = min(w, h)
                box = ((w - side) // 2, (h - side) // 2)
                im = im.crop((box[0], box[1], box[0] + side, box[1] + side))
                im = im.resize((spec.resolution, spec.resolution), PILImage.BICUBIC)
                px = np.asarray(im, dtype=np.float64) / 255.0
        except OSError as e:
            log.warning("skipping unreadable image %s: %s", name, e)
            continue
        if px.ndim == 2:
            px = px[:, :, None]
        out.append(Image(px, name, "folder"))
    if not out:
        raise DataError(f"no readable images in {path}")
    return out


def dataset_from_config(cfg, split):
    size = cfg.train_size if split == "train" else cfg.val_size
    spec = DatasetSpec(
        source=cfg.data_source,
        split=split,
        resolution=cfg.resolution,
        seed=cfg.seed,
        size=size,
        channels=cfg.channels,
        path=cfg.data_path,
    )
    if cfg.data_source == "synthetic":
        return make_mixed(spec, cfg.synth_weights)
    return load_folder(cfg.data_path, spec)
