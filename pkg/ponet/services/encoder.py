# ponet/services/encoder.py: stacked pooling encoder and classification heads
from __future__ import annotations

import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError, InputError, StateError
from ..models.domain import (
    EncoderConfig,
    EncoderParams,
    EncoderResult,
    EncoderTape,
    Head,
    LayerDiagnostics,
    LayerParams,
    LayerTape,
    NormRow,
    Path,
    SegmentMap,
)
from .mix_block import init_projections, mix
from .tensor_core import affine, ensure_finite, gelu, layer_norm

logger = logging.getLogger(__name__)

# branch name in the norm report -> diagnostics key
NORM_BRANCHES = (("GA", "G"), ("SMP", "S_prime"), ("LMP", "L"))


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, dtype: np.dtype = np.float64) -> EncoderParams:
    d, f = cfg.d, cfg.ffn_dim
    layers: List[LayerParams] = []
    for _ in range(cfg.layers):
        layers.append(
            LayerParams(
                mix=init_projections(d, rng, share_kv=cfg.mixer.share_kv, dtype=dtype),
                ln1_g=np.ones(d, dtype=dtype),
                ln1_b=np.zeros(d, dtype=dtype),
                ffn_w1=rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, f)).astype(dtype),
                ffn_b1=np.zeros(f, dtype=dtype),
                ffn_w2=rng.normal(0.0, 1.0 / math.sqrt(f), size=(f, d)).astype(dtype),
                ffn_b2=np.zeros(d, dtype=dtype),
                ln2_g=np.ones(d, dtype=dtype),
                ln2_b=np.zeros(d, dtype=dtype),
            )
        )
    return EncoderParams(
        tok_emb=rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)).astype(dtype),
        pos_emb=rng.normal(0.0, 0.1, size=(cfg.max_len, d)).astype(dtype),
        layers=layers,
        # small head keeps the initial loss near ln(num_classes)
        head_w=rng.normal(0.0, 0.02, size=(d, cfg.num_classes)).astype(dtype),
        head_b=np.zeros(cfg.num_classes, dtype=dtype),
    )


def embed(tokens: Sequence[int], params: EncoderParams, cfg: EncoderConfig) -> np.ndarray:
    n = len(tokens)
    if n == 0:
        raise InputError("empty token sequence")
    if n > cfg.max_len:
        raise InputError(f"sequence length {n} exceeds max_len={cfg.max_len}")
    ids = np.asarray(tokens, dtype=np.intp)
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise InputError(f"token ids must be in [0, {cfg.vocab_size})")
    return params.tok_emb[ids] + params.pos_emb[:n]


def _dropout(
    x: np.ndarray, rate: float, train: bool, rng: Optional[np.random.Generator]
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ConfigError("training-mode dropout needs an explicit rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def encode(
    tokens: Sequence[int],
    seg: SegmentMap,
    params: EncoderParams,
    cfg: EncoderConfig,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    path: Path = "fused",
    diagnostics: bool = False,
    keep_tape: bool = False,
) -> EncoderResult:
    """
    Post-LN stack: H <- LN(H + Dropout(Mix(H))); H <- LN(H + Dropout(FFN(H))).
    """
    h = embed(tokens, params, cfg)
    if seg.n_tokens != h.shape[0]:
        raise InputError(f"segment map covers {seg.n_tokens} tokens, input has {h.shape[0]}")
    diags: List[LayerDiagnostics] = []
    tapes: List[LayerTape] = []
    for i, layer in enumerate(params.layers):
        out = mix(h, layer.mix, seg, cfg.mixer_for_layer(i), path=path, diagnostics=diagnostics, keep_tape=keep_tape)
        m, mix_mask = _dropout(out.p, cfg.dropout_rate, train, rng)
        h1, ln1_hat, ln1_inv = layer_norm(h + m, layer.ln1_g, layer.ln1_b)
        pre = affine(h1, layer.ffn_w1, layer.ffn_b1)
        act = gelu(pre)
        f, ffn_mask = _dropout(affine(act, layer.ffn_w2, layer.ffn_b2), cfg.dropout_rate, train, rng)
        h, ln2_hat, ln2_inv = layer_norm(h1 + f, layer.ln2_g, layer.ln2_b)
        if diagnostics:
            diags.append(LayerDiagnostics(layer=i + 1, branches=out.diagnostics))
        if keep_tape:
            tapes.append(
                LayerTape(
                    mix=out.tape,
                    mix_mask=mix_mask,
                    ln1_hat=ln1_hat,
                    ln1_inv=ln1_inv,
                    h1=h1,
                    ffn_pre=pre,
                    ffn_act=act,
                    ffn_mask=ffn_mask,
                    ln2_hat=ln2_hat,
                    ln2_inv=ln2_inv,
                )
            )
    ensure_finite(h, "encode")
    tape = EncoderTape(tokens=tuple(tokens), layers=tapes, encoded=h) if keep_tape else None
    return EncoderResult(h=h, diagnostics=diags if diagnostics else None, tape=tape)


def pool_for_head(encoded: np.ndarray, head: Head) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if encoded.shape[0] < 1:
        raise InputError("classify needs at least one token")
    if head == "cls_token":
        return encoded[0], None
    idx = np.argmax(encoded, axis=0)
    return encoded[idx, np.arange(encoded.shape[1])], idx


def classify(encoded: np.ndarray, head: Head, params: EncoderParams) -> np.ndarray:
    """
    cls_token: affine over the first row; max_pool: affine over the column max.
    """
    pooled, _ = pool_for_head(encoded, head)
    return affine(pooled, params.head_w, params.head_b)


def branch_norm(x: np.ndarray) -> float:
    # mean over tokens of the per-token RMS over hidden units
    return float(np.mean(np.sqrt(np.mean(x * x, axis=-1))))


def pooling_norms(runs: Sequence[Sequence[LayerDiagnostics]]) -> List[NormRow]:
    """
    Per layer: mean L2 statistic of the GA, SMP and LMP fusion terms over
    all runs, plus their average. Emits layers x 4 rows.
    """
    if not runs or any(not run for run in runs):
        raise StateError("pooling_norms needs diagnostics from at least one forward pass")
    n_layers = len(runs[0])
    rows: List[NormRow] = []
    for layer in range(n_layers):
        values = []
        for branch, key in NORM_BRANCHES:
            per_run = []
            for run in runs:
                if len(run) != n_layers or key not in run[layer].branches:
                    raise StateError(f"diagnostics for layer {layer + 1} lack branch {key}")
                per_run.append(branch_norm(run[layer].branches[key]))
            value = float(np.mean(per_run))
            values.append(value)
            rows.append(NormRow(layer=layer + 1, branch=branch, norm=value))
        rows.append(NormRow(layer=layer + 1, branch="mean", norm=float(np.mean(values))))
    logger.debug("pooling norms computed for %d layers over %d runs", n_layers, len(runs))
    return rows
