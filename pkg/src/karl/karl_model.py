"""Adaptive 1D tokenizer with halting heads and epsilon conditioning.

The encoder runs full self-attention over [grid tokens | 1D init tokens |
epsilon token] and emits one latent plus one halting probability per 1D
slot; the epsilon token is consumed internally. Decoding gathers only the
active tokens into the sequence (structural exclusion, not an attention
mask), so the output is bit-for-bit independent of whatever the halted
tokens contained.

Tensor-level functions (``encode_t``, ``quantize_t``, ``decode_t``) build
autodiff graphs for training; the public single-image operations wrap
them with ``no_grad`` and numpy-facing dataclasses.

Module-level run counters count per-image encoder and decoder passes so
evaluation can assert the single-pass contract.
"""

import dataclasses

import numpy as np

from . import kernels, nn
from .autodiff import Tensor, concat, expand, grad_enabled, no_grad, stopgrad, take0
from .base_tokenizer import Grid2D, decode2d, encode2d, encode_batch
from .config import grid_tokens
from .errors import InputError

ENCODER_RUNS = 0
DECODER_RUNS = 0


def reset_run_counters():
    global ENCODER_RUNS, DECODER_RUNS
    ENCODER_RUNS = 0
    DECODER_RUNS = 0


def run_counters():
    return (ENCODER_RUNS, DECODER_RUNS)


@dataclasses.dataclass
class LatentSequence:
    tokens: np.ndarray  # (t, D1)
    budget: int
    quantized: bool = False
    code_indices: np.ndarray = None  # (t,) into the 1D codebook


@dataclasses.dataclass
class HaltingVector:
    omega: np.ndarray  # (t,) in [0, 1]


@dataclasses.dataclass
class EpsilonCondition:
    value: float
    table_index: int


@dataclasses.dataclass
class KarlParams:
    cfg: object  # Config
    params: dict  # name -> Tensor

    @property
    def dtype(self):
        return self.params["karl.grid_in.w"].dtype


def init_karl(cfg, seed=None, dtype=np.float32):
    """Fresh parameter store for the given config."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence((seed, 23)))
    g = grid_tokens(cfg)
    p = {}

    nn.init_linear(rng, p, "karl.grid_in", cfg.d2, cfg.enc_width, dtype)
    nn.init_embedding(rng, p, "karl.pos2d", g, cfg.enc_width, dtype)
    nn.init_embedding(rng, p, "karl.init_tokens", cfg.t_max, cfg.d1, dtype)
    nn.init_linear(rng, p, "karl.lat_in", cfg.d1, cfg.enc_width, dtype)

    # epsilon rows start as the scalar condition value broadcast across the
    # width: a monotone-in-eps starting point the model can deform freely
    eps0 = np.tile(
        np.asarray(cfg.loss_table, dtype=dtype)[:, None], (1, cfg.enc_width)
    )
    eps0 = eps0 + rng.normal(0.0, 0.01, size=eps0.shape).astype(dtype)
    p["karl.eps_emb"] = Tensor(eps0, requires_grad=True)

    nn.init_transformer(rng, p, "karl.enc", cfg.enc_depth, cfg.enc_width, cfg.mlp_ratio, dtype)
    nn.init_linear(rng, p, "karl.enc_out", cfg.enc_width, cfg.d1, dtype)
    nn.init_linear(rng, p, "karl.halt", cfg.d1, 1, dtype)

    if cfg.mode_1d == "discrete":
        nn.init_linear(rng, p, "karl.pin", cfg.d1, cfg.d_q, dtype)
        nn.init_embedding(rng, p, "karl.codebook", cfg.codebook_size, cfg.d_q, dtype, std=0.5)
        nn.init_linear(rng, p, "karl.pout", cfg.d_q, cfg.d1, dtype)

    nn.init_linear(rng, p, "karl.dec_in", cfg.d1, cfg.dec_width, dtype)
    nn.init_embedding(rng, p, "karl.dec_queries", g, cfg.dec_width, dtype)
    nn.init_transformer(rng, p, "karl.dec", cfg.dec_depth, cfg.dec_width, cfg.mlp_ratio, dtype)
    out_dim = cfg.k_base if cfg.base_mode == "discrete" else cfg.d2
    nn.init_linear(rng, p, "karl.dec_out", cfg.dec_width, out_dim, dtype)
    return KarlParams(cfg=cfg, params=p)


# ---------------------------------------------------------------------------
# Codebook maintenance
# ---------------------------------------------------------------------------

class VQStats:
    """Code-usage window for dead-code revival during training.

    quantize_t feeds it assignments while a loss graph is being built
    (inference runs under no_grad and stays invisible here)."""

    def __init__(self, k):
        self.usage = np.zeros(k, dtype=np.int64)
        self.low_pool = None  # latest projected latents, (n, d_q)

    def observe(self, idx, low):
        self.usage += np.bincount(idx.ravel(), minlength=self.usage.shape[0])
        self.low_pool = low

    def reset_window(self):
        self.usage[:] = 0


def seed_codebook(model, base, images, rng):
    """Place the 1D codebook on the projected latent cloud of `images`.

    Randomly initialized codes can sit so far from the encoder output
    that one code captures every token, and the commitment term then
    collapses the cloud onto it. Seeding from data keeps assignments
    diverse from the first step. No-op in continuous mode."""
    cfg = model.cfg
    if cfg.mode_1d != "discrete":
        return
    pix = np.stack([im.pixels for im in images]).astype(np.float32)
    tokens, _ = encode_batch(base, pix)
    with no_grad():
        lat, _ = encode_t(model, tokens, cfg.t_max, np.zeros(len(images), dtype=np.int64))
        low = nn.linear(lat, model.params, "karl.pin")
    flat = low.data.reshape(-1, low.shape[-1])
    k = cfg.codebook_size
    pick = rng.choice(flat.shape[0], size=k, replace=flat.shape[0] < k)
    jitter = 0.01 * rng.standard_normal((k, flat.shape[-1]))
    model.params["karl.codebook"].data = (flat[pick] + jitter).astype(model.dtype)


def revive_dead_codes(model, rng):
    """Move codes unused over the last usage window onto random recent
    projected latents. Returns the number of codes moved."""
    stats = getattr(model, "vq_stats", None)
    if stats is None or stats.low_pool is None:
        return 0
    dead = np.flatnonzero(stats.usage == 0)
    if dead.size:
        pool = stats.low_pool
        pick = rng.choice(pool.shape[0], size=dead.size, replace=pool.shape[0] < dead.size)
        jitter = 0.01 * rng.standard_normal((dead.size, pool.shape[1]))
        cb = model.params["karl.codebook"].data
        cb[dead] = (pool[pick] + jitter).astype(cb.dtype)
    stats.reset_window()
    return int(dead.size)


# ---------------------------------------------------------------------------
# Tensor-level paths (training and inference share these)
# ---------------------------------------------------------------------------

def encode_t(model, grid_tokens_b, T, eps_idx):
    """Batched encode.

    grid_tokens_b: (B, G, D2) array; eps_idx: (B,) table indices.
    Returns (lat (B, T, D1), omega (B, T)) as Tensors.
    """
    global ENCODER_RUNS
    cfg = model.cfg
    p = model.params
    b = grid_tokens_b.shape[0]
    ENCODER_RUNS += b

    x = Tensor(grid_tokens_b.astype(model.dtype))
    h_grid = nn.linear(x, p, "karl.grid_in") + p["karl.pos2d"]
    lat0 = nn.linear(p["karl.init_tokens"][:T], p, "karl.lat_in")
    h_lat = expand(lat0.reshape(1, T, cfg.enc_width), (b, T, cfg.enc_width))
    h_eps = take0(p["karl.eps_emb"], np.asarray(eps_idx)).reshape(b, 1, cfg.enc_width)
    seq = concat([h_grid, h_lat, h_eps], axis=1)
    h = nn.transformer(seq, p, "karl.enc", cfg.enc_depth, cfg.n_heads)
    g = grid_tokens_b.shape[1]
    lat = nn.linear(h[:, g : g + T], p, "karl.enc_out")
    omega = nn.linear(lat, p, "karl.halt").sigmoid().reshape(b, T)
    return lat, omega


def quantize_t(model, lat):
    """Factorized vector quantization with straight-through gradients.

    lat: (B, T, D1) Tensor. Returns (lat_q, quant_loss (B,) Tensor,
    idx (B, T) int array). quant_loss = codebook term + commitment term,
    each a per-image mean over tokens and dims.
    """
    p = model.params
    low = nn.linear(lat, p, "karl.pin")
    b, t, dq = low.shape
    idx, _ = kernels.nearest_codes(
        low.data.reshape(-1, dq).astype(np.float64),
        p["karl.codebook"].data.astype(np.float64),
    )
    idx = idx.reshape(b, t)
    stats = getattr(model, "vq_stats", None)
    if stats is not None and grad_enabled():
        stats.observe(idx, low.data.reshape(-1, dq))
    codes = take0(p["karl.codebook"], idx)
    cb_term = ((stopgrad(low) - codes) ** 2.0).mean(axis=(1, 2))
    commit = ((low - stopgrad(codes)) ** 2.0).mean(axis=(1, 2))
    low_q = low + stopgrad(codes - low)
    lat_q = nn.linear(low_q, p, "karl.pout")
    return lat_q, cb_term + commit, idx


def bridge_t(model, lat):
    """Latents as the decoder sees them: quantized round trip in discrete
    mode, identity in continuous mode (per-image quant loss of zero)."""
    if model.cfg.mode_1d == "discrete":
        lat_q, quant, idx = quantize_t(model, lat)
        return lat_q, quant, idx
    zero = Tensor(np.zeros(lat.shape[0], dtype=model.dtype))
    return lat, zero, None


def decode_t(model, active):
    """Batched decode from active tokens only.

    active: (B, t, D1) Tensor. Returns (B, G, D2) grid embeddings in
    continuous base mode or (B, G, K_base) code logits in discrete mode.
    """
    global DECODER_RUNS
    cfg = model.cfg
    p = model.params
    b, t, _ = active.shape
    DECODER_RUNS += b
    g = p["karl.dec_queries"].shape[0]

    h_tok = nn.linear(active, p, "karl.dec_in")
    q = expand(p["karl.dec_queries"].reshape(1, g, cfg.dec_width), (b, g, cfg.dec_width))
    seq = concat([h_tok, q], axis=1)
    h = nn.transformer(seq, p, "karl.dec", cfg.dec_depth, cfg.n_heads)
    return nn.linear(h[:, t:], p, "karl.dec_out")


# ---------------------------------------------------------------------------
# Public single-image operations
# ---------------------------------------------------------------------------

def _check_eps(cfg, eps):
    if not isinstance(eps, EpsilonCondition):
        raise InputError("eps must be an EpsilonCondition")
    table = cfg.loss_table
    if not 0 <= eps.table_index < len(table):
        raise InputError(f"eps table_index {eps.table_index} out of range")
    if abs(table[eps.table_index] - eps.value) > 1e-12:
        raise InputError(
            f"eps value {eps.value} is not table entry {eps.table_index} "
            f"({table[eps.table_index]})"
        )


def encode(model, grid, T, eps):
    """Grid2D -> (LatentSequence of exactly T tokens, HaltingVector)."""
    cfg = model.cfg
    if T not in cfg.budget_grid:
        raise InputError(f"budget {T} not in grid {cfg.budget_grid}")
    _check_eps(cfg, eps)
    with no_grad():
        lat, omega = encode_t(model, grid.tokens[None], T, np.array([eps.table_index]))
    return (
        LatentSequence(tokens=lat.data[0], budget=T),
        HaltingVector(omega=omega.data[0]),
    )


def quantize(model, z):
    """Snap each token to its nearest factorized code; returns the
    quantized sequence and the quantization loss value."""
    if z.tokens.shape[0] == 0:
        raise InputError("quantize: empty sequence")
    if z.quantized:
        raise InputError("quantize: sequence already quantized")
    with no_grad():
        lat_q, quant, idx = quantize_t(model, Tensor(z.tokens[None]))
    return (
        LatentSequence(
            tokens=lat_q.data[0],
            budget=z.budget,
            quantized=True,
            code_indices=idx[0],
        ),
        float(quant.data[0]),
    )


def select_active(z, halting, threshold=0.75):
    """Keep tokens with omega < threshold, preserving order; if every token
    halts, keep the single lowest-omega token."""
    omega = halting.omega if isinstance(halting, HaltingVector) else np.asarray(halting)
    if omega.shape[0] != z.tokens.shape[0]:
        raise InputError("select_active: omega/token length mismatch")
    if not 0.0 < threshold < 1.0:
        raise InputError(f"select_active: threshold {threshold} outside (0,1)")
    keep = np.flatnonzero(omega < threshold)
    if keep.size == 0:
        keep = np.array([int(np.argmin(omega))])
    return LatentSequence(
        tokens=z.tokens[keep],
        budget=int(keep.size),
        quantized=z.quantized,
        code_indices=None if z.code_indices is None else z.code_indices[keep],
    )


def decode(model, active, grid_shape=None):
    """Active LatentSequence -> predicted Grid2D of G tokens.

    Output depends only on the active tokens. In discrete base mode
    tokens holds the code logits and code_indices their argmax.
    """
    if active.tokens.shape[0] == 0:
        raise InputError("decode: empty active sequence")
    cfg = model.cfg
    g = grid_tokens(cfg)
    if grid_shape is not None and int(np.prod(grid_shape)) != g:
        raise InputError(f"decode: grid shape {grid_shape} does not give G={g}")
    with no_grad():
        out = decode_t(model, Tensor(active.tokens[None]))
    if cfg.base_mode == "discrete":
        idx = np.argmax(out.data[0], axis=-1)
        return Grid2D(tokens=out.data[0], mode="discrete", code_indices=idx)
    return Grid2D(tokens=out.data[0], mode="continuous")


def reconstruct(model, base, image, T, eps, threshold=0.75):
    """Full pipeline: encode, quantize (discrete mode), select, decode,
    pixel decode. Returns (reconstructed Image, KCEstimate)."""
    from .kc_analysis import KCEstimate
    from .metrics import pixel_l1

    grid = encode2d(base, image)
    z, halting = encode(model, grid, T, eps)
    if model.cfg.mode_1d == "discrete":
        z, _ = quantize(model, z)
    active = select_active(z, halting, threshold)
    grid_hat = decode(model, active)
    img_hat = decode2d(base, grid_hat)
    err = pixel_l1(image, img_hat)
    est = KCEstimate(
        t_hat=active.budget,
        eps=eps.value,
        budget=T,
        satisfied=bool(err <= eps.value),
        achieved_err=float(err),
    )
    return img_hat, est
