"""Versioned checkpoint container.

One ``.npz`` file holds a JSON metadata header (format version, config
digest, full config JSON, checkpoint kind) plus every parameter array
under a ``param/`` prefix. Loading verifies the format version and, when
the caller supplies a runtime config, that its digest matches the one the
checkpoint was written with.
"""

import json
import os

import numpy as np

from . import config as config_mod
from .autodiff import Tensor
from .errors import CheckpointMismatchError, DataError

FORMAT_VERSION = 1


def save_checkpoint(path, kind, cfg, params, extra=None):
    """Write params (dict of name -> Tensor or ndarray) with config metadata."""
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config_digest": cfg.digest(),
        "config_json": cfg.to_json(),
        "extra": extra or {},
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else np.asarray(p)
        arrays["param/" + name] = data
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path, cfg=None, kind=None, trainable=True):
    """Load a checkpoint; returns (cfg, params dict of Tensors, meta).

    If cfg is given its digest must match the stored one. If kind is given
    the stored kind must match.
    """
    try:
        with np.load(path) as z:
            names = list(z.files)
            if "__meta__" not in names:
                raise DataError(f"{path}: not a checkpoint (missing metadata)")
            meta = json.loads(bytes(z["__meta__"]).decode())
            arrays = {n[len("param/"):]: z[n] for n in names if n.startswith("param/")}
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointMismatchError(
            f"{path}: format version {meta.get('format_version')} != {FORMAT_VERSION}"
        )
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointMismatchError(
            f"{path}: checkpoint kind {meta.get('kind')!r}, expected {kind!r}"
        )
    if cfg is not None and cfg.digest() != meta["config_digest"]:
        raise CheckpointMismatchError(
            f"{path}: config digest {meta['config_digest']} does not match "
            f"runtime config {cfg.digest()}"
        )
    stored_cfg = config_mod.from_json(meta["config_json"])
    params = {k: Tensor(v, requires_grad=trainable) for k, v in arrays.items()}
    return stored_cfg, params, meta


def save_base(path, cfg, base):
    save_checkpoint(path, "base", cfg, base.params)


def load_base(path, cfg=None):
    """Load a base-tokenizer checkpoint; when cfg is given, only the
    base-determining fields must match (1D-model fields may differ)."""
    from .base_tokenizer import BaseTokenizerParams

    stored_cfg, params, _ = load_checkpoint(path, kind="base", trainable=False)
    if cfg is not None and config_mod.base_digest(cfg) != config_mod.base_digest(stored_cfg):
        raise CheckpointMismatchError(
            f"{path}: base fields of checkpoint config do not match runtime config"
        )
    return BaseTokenizerParams(
        patch_size=stored_cfg.patch_size,
        d2=stored_cfg.d2,
        mode=stored_cfg.base_mode,
        resolution=stored_cfg.resolution,
        channels=stored_cfg.channels,
        params=params,
    )


def save_bundle(path, cfg, model, base, extra=None):
    """One file holding the trained 1D model plus its frozen base."""
    merged = dict(model.params)
    merged.update(base.params)
    save_checkpoint(path, "karl", cfg, merged, extra=extra)


def load_bundle(path, cfg=None, trainable=False):
    """Load a combined checkpoint; returns (cfg, model, base)."""
    from .base_tokenizer import BaseTokenizerParams
    from .karl_model import KarlParams

    stored_cfg, params, _ = load_checkpoint(path, cfg=cfg, kind="karl", trainable=False)
    karl_params = {}
    base_params = {}
    for name, t in params.items():
        if name.startswith("base."):
            base_params[name] = t
        else:
            t.requires_grad = trainable
            karl_params[name] = t
    model = KarlParams(cfg=stored_cfg, params=karl_params)
    base = BaseTokenizerParams(
        patch_size=stored_cfg.patch_size,
        d2=stored_cfg.d2,
        mode=stored_cfg.base_mode,
        resolution=stored_cfg.resolution,
        channels=stored_cfg.channels,
        params=base_params,
    )
    return stored_cfg, model, base
