"""Desk-scale stand-in for a pretrained 2D image tokenizer.

A linear patch autoencoder maps non-overlapping patches to D2-dim grid
tokens and back. In discrete mode a codebook snaps each token to its
nearest code (straight-through gradients during fitting only). After
``fit_base`` the parameters are frozen; everything downstream treats the
grid tokens as a fixed representation whose cost is amortized.
"""

import dataclasses

import numpy as np

from . import kernels
from .autodiff import Adam, Tensor, no_grad, stopgrad, take0
from .config import grid_tokens
from .data import Image
from .errors import ConfigError, DataError, InputError


@dataclasses.dataclass
class Grid2D:
    tokens: np.ndarray  # (G, D2) float32
    mode: str  # continuous | discrete
    code_indices: np.ndarray = None  # (G,) int64 in discrete mode


@dataclasses.dataclass
class BaseTokenizerParams:
    patch_size: int
    d2: int
    mode: str
    resolution: int
    channels: int
    params: dict  # name -> Tensor, frozen after fit

    @property
    def codebook(self):
        t = self.params.get("base.codebook")
        return None if t is None else t.data


def patchify(pixels, patch):
    """(B, H, W, C) -> (B, G, patch*patch*C), row-major patch order."""
    b, h, w, c = pixels.shape
    gh, gw = h // patch, w // patch
    x = pixels.reshape(b, gh, patch, gw, patch, c)
    return x.swapaxes(2, 3).reshape(b, gh * gw, patch * patch * c)


def unpatchify(patches, resolution, patch, channels):
    """(B, G, patch*patch*C) -> (B, H, W, C), inverse of patchify."""
    b = patches.shape[0]
    g = resolution // patch
    x = patches.reshape(b, g, g, patch, patch, channels)
    return x.swapaxes(2, 3).reshape(b, resolution, resolution, channels)


def unpatchify_t(patches, resolution, patch, channels):
    """Differentiable unpatchify on a Tensor of shape (B, G, P)."""
    b = patches.shape[0]
    g = resolution // patch
    x = patches.reshape(b, g, g, patch, patch, channels)
    return x.swapaxes(2, 3).reshape(b, resolution, resolution, channels)


def _stack_pixels(dataset):
    return np.stack([im.pixels for im in dataset]).astype(np.float32)


def fit_base(dataset, cfg, epochs=None, seed=None):
    """Train the patch autoencoder; returns frozen BaseTokenizerParams."""
    if not dataset:
        raise DataError("fit_base: empty dataset")
    h, w, c = dataset[0].pixels.shape
    if h % cfg.patch_size or w % cfg.patch_size:
        raise ConfigError(
            f"image {h}x{w} not divisible by patch_size {cfg.patch_size}"
        )
    epochs = cfg.base_epochs if epochs is None else epochs
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
    p = cfg.patch_size * cfg.patch_size * cfg.channels

    params = {}
    w_enc = rng.normal(0.0, 1.0 / np.sqrt(p), size=(p, cfg.d2)).astype(np.float32)
    w_dec = rng.normal(0.0, 1.0 / np.sqrt(cfg.d2), size=(cfg.d2, p)).astype(np.float32)
    params["base.enc.w"] = Tensor(w_enc, requires_grad=True)
    params["base.enc.b"] = Tensor(np.zeros(cfg.d2, dtype=np.float32), requires_grad=True)
    params["base.dec.w"] = Tensor(w_dec, requires_grad=True)
    params["base.dec.b"] = Tensor(np.zeros(p, dtype=np.float32), requires_grad=True)

    flat = patchify(_stack_pixels(dataset), cfg.patch_size).reshape(-1, p)

    discrete = cfg.base_mode == "discrete"
    if discrete:
        # seed the codebook with encodings of random patches so no code
        # starts far from the data
        pick = rng.choice(flat.shape[0], size=cfg.k_base, replace=flat.shape[0] < cfg.k_base)
        init_codes = flat[pick] @ w_enc + 0.0
        params["base.codebook"] = Tensor(init_codes.astype(np.float32), requires_grad=True)

    opt = Adam(params, lr=cfg.base_lr)
    batch = 2048
    for _ in range(epochs):
        order = rng.permutation(flat.shape[0])
        for s in range(0, flat.shape[0], batch):
            idx = order[s : s + batch]
            x = Tensor(flat[idx])
            z = x @ params["base.enc.w"] + params["base.enc.b"]
            extra = None
            if discrete:
                code_idx, _ = kernels.nearest_codes(
                    z.data.astype(np.float64), params["base.codebook"].data.astype(np.float64)
                )
                codes = take0(params["base.codebook"], code_idx)
                zq = z + stopgrad(codes - z)
                cb = ((stopgrad(z) - codes) ** 2.0).mean()
                commit = ((z - stopgrad(codes)) ** 2.0).mean()
                extra = cb + 0.25 * commit
                z = zq
            xhat = z @ params["base.dec.w"] + params["base.dec.b"]
            loss = (xhat - x).abs().mean()
            if extra is not None:
                loss = loss + extra
            opt.zero_grad()
            loss.backward()
            opt.step()

    for t in params.values():
        t.requires_grad = False
    return BaseTokenizerParams(
        patch_size=cfg.patch_size,
        d2=cfg.d2,
        mode=cfg.base_mode,
        resolution=h,
        channels=c,
        params=params,
    )


def encode_batch(base, pixels):
    """(B, H, W, C) float array -> (tokens (B, G, D2) float32, indices or None)."""
    flat = patchify(pixels.astype(np.float32), base.patch_size)
    z = flat @ base.params["base.enc.w"].data + base.params["base.enc.b"].data
    if base.mode == "discrete":
        b, g, d = z.shape
        idx, _ = kernels.nearest_codes(
            z.reshape(-1, d).astype(np.float64), base.codebook.astype(np.float64)
        )
        idx = idx.reshape(b, g)
        z = base.codebook[idx].astype(np.float32)
        return z, idx
    return z, None


def encode2d(base, image):
    """Image -> Grid2D of exactly G tokens."""
    px = image.pixels if isinstance(image, Image) else np.asarray(image)
    if px.shape != (base.resolution, base.resolution, base.channels):
        raise InputError(
            f"encode2d: image shape {px.shape} does not match "
            f"({base.resolution}, {base.resolution}, {base.channels})"
        )
    tokens, idx = encode_batch(base, px[None])
    return Grid2D(
        tokens=tokens[0],
        mode=base.mode,
        code_indices=None if idx is None else idx[0],
    )


def decode_tokens(base, tokens):
    """(B, G, D2) float array -> (B, H, W, C) image array clamped to [0,1]."""
    flat = tokens @ base.params["base.dec.w"].data + base.params["base.dec.b"].data
    img = unpatchify(flat, base.resolution, base.patch_size, base.channels)
    return np.clip(img, 0.0, 1.0)


def decode_tokens_t(base, tokens):
    """Differentiable decode on a Tensor (B, G, D2) -> (B, H, W, C), unclamped."""
    flat = tokens @ base.params["base.dec.w"] + base.params["base.dec.b"]
    return unpatchify_t(flat, base.resolution, base.patch_size, base.channels)


def decode_pred(base, pred):
    """Pixel-decode a decoder prediction: (B, G, D2) embeddings in
    continuous mode, (B, G, K_base) code logits (argmax lookup) in
    discrete mode. Returns (B, H, W, C) clamped to [0, 1]."""
    if base.mode == "discrete":
        idx = np.argmax(pred, axis=-1)
        pred = base.codebook[idx]
    return decode_tokens(base, pred.astype(np.float32))


def decode2d(base, grid):
    """Grid2D -> Image in [0,1].

    A discrete grid carrying code_indices decodes through the codebook
    lookup (grid.tokens may hold code logits in that case).
    """
    g_expected = (base.resolution // base.patch_size) ** 2
    if grid.mode == "discrete" and grid.code_indices is not None:
        if grid.code_indices.shape[0] != g_expected:
            raise InputError(
                f"decode2d: got {grid.code_indices.shape[0]} tokens, grid needs {g_expected}"
            )
        tokens = base.codebook[grid.code_indices]
    else:
        if grid.tokens.shape[0] != g_expected:
            raise InputError(
                f"decode2d: got {grid.tokens.shape[0]} tokens, grid needs {g_expected}"
            )
        tokens = grid.tokens
    img = decode_tokens(base, tokens[None].astype(np.float32))[0]
    return Image(img.astype(np.float64), id="decoded", kind="")


def expected_grid(cfg):
    return grid_tokens(cfg)
