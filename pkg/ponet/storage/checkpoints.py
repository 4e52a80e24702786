# ponet/storage/checkpoints.py: JSON checkpoint container for encoder parameters
from __future__ import annotations

import json
import logging
from pathlib import Path as FsPath
from typing import Dict, Tuple

import numpy as np
from pydantic import ValidationError

from ..errors import InputError
from ..models.domain import (
    LAYER_TENSORS,
    PROJECTION_NAMES,
    EncoderConfig,
    EncoderParams,
    LayerParams,
    ProjectionSet,
)

logger = logging.getLogger(__name__)

FORMAT = "ponet-checkpoint"
VERSION = 1


def _encode_tensor(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "dtype": str(arr.dtype), "data": arr.ravel().tolist()}


def _decode_tensor(name: str, doc: dict) -> np.ndarray:
    try:
        dtype = np.dtype(doc["dtype"])
        if dtype not in (np.float32, np.float64):
            raise InputError(f"tensor {name}: unsupported dtype {dtype}")
        return np.asarray(doc["data"], dtype=dtype).reshape(doc["shape"])
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, InputError):
            raise
        raise InputError(f"tensor {name}: malformed entry ({e})") from e


def save_checkpoint(path: FsPath, params: EncoderParams, cfg: EncoderConfig) -> FsPath:
    path = FsPath(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "config": cfg.model_dump(),
        "tensors": {name: _encode_tensor(arr) for name, arr in params.named()},
    }
    path.write_text(json.dumps(doc))
    logger.info("checkpoint written to %s", path)
    return path


def load_checkpoint(path: FsPath) -> Tuple[EncoderParams, EncoderConfig]:
    """
    Rebuilds parameters and config; a shared key/value projection comes
    back as one array referenced twice.
    """
    try:
        doc = json.loads(FsPath(path).read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: not JSON ({e})") from e
    if doc.get("format") != FORMAT or doc.get("version") != VERSION:
        raise InputError(f"{path}: expected {FORMAT} version {VERSION}")
    try:
        cfg = EncoderConfig.model_validate(doc["config"])
    except (KeyError, ValidationError) as e:
        raise InputError(f"{path}: invalid config ({e})") from e

    raw = doc.get("tensors", {})
    tensors: Dict[str, np.ndarray] = {name: _decode_tensor(name, entry) for name, entry in raw.items()}

    def take(name: str) -> np.ndarray:
        if name not in tensors:
            raise InputError(f"{path}: missing tensor {name}")
        return tensors[name]

    layers = []
    for i in range(cfg.layers):
        mix: Dict[str, np.ndarray] = {}
        for proj in PROJECTION_NAMES:
            if cfg.mixer.share_kv and proj == "vg":
                continue
            mix[f"w_{proj}"] = take(f"layers.{i}.mix.w_{proj}")
            mix[f"b_{proj}"] = take(f"layers.{i}.mix.b_{proj}")
        if cfg.mixer.share_kv:
            mix["w_vg"], mix["b_vg"] = mix["w_kg"], mix["b_kg"]
        try:
            layers.append(
                LayerParams(
                    mix=ProjectionSet(share_kv=cfg.mixer.share_kv, **mix),
                    **{name: take(f"layers.{i}.{name}") for name in LAYER_TENSORS},
                )
            )
        except ValidationError as e:
            raise InputError(f"{path}: layer {i} tensors inconsistent ({e})") from e
    params = EncoderParams(
        tok_emb=take("tok_emb"),
        pos_emb=take("pos_emb"),
        layers=layers,
        head_w=take("head_w"),
        head_b=take("head_b"),
    )
    return params, cfg
