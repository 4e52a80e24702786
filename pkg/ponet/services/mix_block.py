# ponet/services/mix_block.py: multi-granularity pooling block
from __future__ import annotations

import math
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, DimensionError
from ..models.domain import (
    BlockTape,
    MixerConfig,
    MixerOutput,
    Path,
    Projections,
    ProjectionSet,
    SegmentMap,
)
from .tensor_core import (
    OpCounter,
    affine,
    ensure_finite,
    hadamard,
    matmul,
    reduce_max_argmax,
    reduce_mean,
    softmax,
)


def init_projections(
    d: int,
    rng: np.random.Generator,
    share_kv: bool = True,
    std: Optional[float] = None,
    dtype: np.dtype = np.float64,
) -> ProjectionSet:
    std = 1.0 / math.sqrt(d) if std is None else std
    arrays: Dict[str, np.ndarray] = {}
    for name in ("qg", "kg", "vg", "s", "l", "o"):
        if share_kv and name == "vg":
            continue
        arrays[f"w_{name}"] = rng.normal(0.0, std, size=(d, d)).astype(dtype)
        arrays[f"b_{name}"] = np.zeros(d, dtype=dtype)
    if share_kv:
        arrays["w_vg"] = arrays["w_kg"]
        arrays["b_vg"] = arrays["b_kg"]
    return ProjectionSet(share_kv=share_kv, **arrays)


def project_all(h: np.ndarray, params: ProjectionSet, counter: Optional[OpCounter] = None) -> Projections:
    """
    H_* = H W_* + b_* for the six projections. The shared key/value
    projection is computed once.
    """
    if h.ndim != 2 or h.shape[1] != params.d:
        raise DimensionError(f"project_all: H shape {h.shape} vs d={params.d}")
    ensure_finite(h, "project_all")
    kg = affine(h, params.w_kg, params.b_kg, counter)
    vg = kg if params.share_kv else affine(h, params.w_vg, params.b_vg, counter)
    return Projections(
        qg=affine(h, params.w_qg, params.b_qg, counter),
        kg=kg,
        vg=vg,
        s=affine(h, params.w_s, params.b_s, counter),
        l=affine(h, params.w_l, params.b_l, counter),
        o=affine(h, params.w_o, params.b_o, counter),
    )


def ga_first_stage(h_qg: np.ndarray) -> np.ndarray:
    return reduce_mean(h_qg, axis=0)


def ga_second_stage(
    g: np.ndarray,
    h_kg: np.ndarray,
    h_vg: np.ndarray,
    cfg: MixerConfig,
    counter: Optional[OpCounter] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Single-query cross-attention of g over the sequence, per head.
    Returns g' (d,) and the attention weights (heads, N).
    """
    n, d = h_kg.shape
    if g.shape != (d,) or h_vg.shape != (n, d):
        raise DimensionError(f"ga_second_stage: g {g.shape}, K {h_kg.shape}, V {h_vg.shape}")
    if d % cfg.heads:
        raise ConfigError(f"heads={cfg.heads} does not divide d={d}")
    dh = d // cfg.heads
    k_heads = h_kg.reshape(n, cfg.heads, dh).transpose(1, 0, 2)
    v_heads = h_vg.reshape(n, cfg.heads, dh).transpose(1, 0, 2)
    q_heads = g.reshape(cfg.heads, dh, 1)
    scores = matmul(k_heads, q_heads, counter)[:, :, 0] * (1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=1)
    g_prime = matmul(weights[:, None, :], v_heads, counter).reshape(d)
    return g_prime, weights


def smp(h_s: np.ndarray, seg: SegmentMap) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-segment, per-dimension max. Returns S (K, d) and the absolute token
    index of each winner (K, d).
    """
    if seg.n_tokens != h_s.shape[0]:
        raise DimensionError(f"smp: segment map covers {seg.n_tokens} tokens, H_s has {h_s.shape[0]}")
    ends = seg.boundaries[1:] + (seg.n_tokens,)
    idx = np.empty((seg.k, h_s.shape[1]), dtype=np.intp)
    for sid, (start, end) in enumerate(zip(seg.boundaries, ends)):
        _, local = reduce_max_argmax(h_s[start:end], axis=0)
        idx[sid] = local + start
    values = np.take_along_axis(h_s, idx, axis=0)
    return values, idx


def _windowed_max(padded: np.ndarray, offsets: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    candidates = np.stack([padded[o:o + n] for o in offsets])
    which = np.argmax(candidates, axis=0)
    return np.take_along_axis(candidates, which[None], axis=0)[0], which


def lmp(h_l: np.ndarray, window: int = 3, stride: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sliding-window max with output length N. Boundary windows are truncated,
    so padding never wins. Returns L (N, d) and winner indices (N, d).
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"lmp window must be odd, got {window}")
    if stride != 1:
        raise ConfigError(f"lmp stride {stride} not supported (only 1)")
    n, _ = h_l.shape
    r = window // 2
    if r == 0:
        return h_l.copy(), np.broadcast_to(np.arange(n)[:, None], h_l.shape).copy()
    padded = np.pad(h_l, ((r, r), (0, 0)), constant_values=-np.inf)
    windows = sliding_window_view(padded, window, axis=0)
    offset = np.argmax(windows, axis=-1)
    values = np.take_along_axis(windows, offset[..., None], axis=-1)[..., 0]
    idx = np.arange(n)[:, None] - r + offset
    return values, idx


def tmp(h: np.ndarray, layer_index: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Dilated three-tap max with dilation 2**(layer_index - 1); out-of-range
    neighbours are skipped.
    """
    if layer_index < 1:
        raise ConfigError(f"layer_index must be >= 1, got {layer_index}")
    n = h.shape[0]
    delta = 2 ** (layer_index - 1)
    padded = np.pad(h, ((delta, delta), (0, 0)), constant_values=-np.inf)
    values, which = _windowed_max(padded, np.array([0, delta, 2 * delta]), n)
    idx = np.arange(n)[:, None] + (which - 1) * delta
    return values, idx


def fuse_naive(
    g_prime: Optional[np.ndarray],
    S: Optional[np.ndarray],
    L: Optional[np.ndarray],
    h_o: np.ndarray,
    seg: SegmentMap,
    counter: Optional[OpCounter] = None,
    T: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    P = g' * H_o + S[k(n)] * H_o + L (+ T). A None term is a disabled branch.
    """
    n, d = h_o.shape
    p = np.zeros_like(h_o)
    if g_prime is not None:
        if g_prime.shape != (d,):
            raise DimensionError(f"fuse_naive: g' {g_prime.shape} vs d={d}")
        p = p + hadamard(np.broadcast_to(g_prime, h_o.shape), h_o, counter)
    if S is not None:
        if S.shape != (seg.k, d) or seg.n_tokens != n:
            raise DimensionError(f"fuse_naive: S {S.shape} vs K={seg.k}, d={d}")
        p = p + hadamard(S[seg.ids_array], h_o, counter)
    if L is not None:
        if L.shape != h_o.shape:
            raise DimensionError(f"fuse_naive: L {L.shape} vs {h_o.shape}")
        p = p + L
    if T is not None:
        p = p + T
    return p


def _fuse_fused(
    global_term: Optional[np.ndarray],
    S: Optional[np.ndarray],
    L: Optional[np.ndarray],
    h_o: np.ndarray,
    seg: SegmentMap,
    counter: Optional[OpCounter],
    T: Optional[np.ndarray],
) -> np.ndarray:
    # (g' + S[k(n)]) * H_o[n] + L[n]: one product per element
    coef = None
    if global_term is not None:
        coef = np.broadcast_to(global_term, h_o.shape)
    if S is not None:
        coef = S[seg.ids_array] if coef is None else coef + S[seg.ids_array]
    p = np.zeros_like(h_o) if coef is None else hadamard(coef, h_o, counter)
    if L is not None:
        p = p + L
    if T is not None:
        p = p + T
    return p


def _diagnostics(
    g: np.ndarray,
    g_prime: Optional[np.ndarray],
    global_term: Optional[np.ndarray],
    S: np.ndarray,
    L: np.ndarray,
    T: Optional[np.ndarray],
    h_o: np.ndarray,
    seg: SegmentMap,
    cfg: MixerConfig,
) -> Dict[str, np.ndarray]:
    zeros = np.zeros_like(h_o)
    out = {
        "g": g,
        "g_prime": g_prime if g_prime is not None else np.zeros_like(g),
        "S": S,
        "L": L if cfg.uses_lmp else zeros,
        "G": global_term * h_o if global_term is not None else zeros,
        "S_prime": S[seg.ids_array] * h_o if cfg.uses_smp else zeros,
    }
    if T is not None:
        out["T"] = T
    return out


def _forward(
    h: np.ndarray,
    params: ProjectionSet,
    seg: SegmentMap,
    cfg: MixerConfig,
    path: Path,
    counter: Optional[OpCounter],
    diagnostics: bool,
    keep_tape: bool,
) -> MixerOutput:
    if h.ndim != 2 or h.shape[1] != cfg.d or params.d != cfg.d:
        raise DimensionError(f"mixer: H shape {h.shape}, cfg.d={cfg.d}, params.d={params.d}")
    if seg.n_tokens != h.shape[0]:
        raise DimensionError(f"mixer: segment map covers {seg.n_tokens} tokens, H has {h.shape[0]}")
    if params.share_kv != cfg.share_kv:
        raise ConfigError("ProjectionSet.share_kv disagrees with MixerConfig.share_kv")

    h_mean = reduce_mean(h, axis=0)
    if path == "naive":
        proj = project_all(h, params, counter)
        g = ga_first_stage(proj.qg)
    else:
        # pool first, then one affine map on a single row
        g = affine(h_mean, params.w_qg, params.b_qg, counter)
        kg = affine(h, params.w_kg, params.b_kg, counter)
        vg = kg if params.share_kv else affine(h, params.w_vg, params.b_vg, counter)
        proj = Projections(
            qg=np.empty((0, cfg.d), dtype=h.dtype),
            kg=kg,
            vg=vg,
            s=affine(h, params.w_s, params.b_s, counter),
            l=affine(h, params.w_l, params.b_l, counter),
            o=affine(h, params.w_o, params.b_o, counter),
        )

    g_prime = attn = None
    if cfg.uses_ss_ga:
        g_prime, attn = ga_second_stage(g, proj.kg, proj.vg, cfg, counter)
    global_term = None
    if cfg.uses_ga:
        global_term = g_prime if cfg.uses_ss_ga else g

    S, smp_idx = smp(proj.s, seg)
    L, lmp_idx = lmp(proj.l, cfg.lmp_window, cfg.lmp_stride)
    T = tmp_idx = None
    if cfg.tmp_enabled:
        T, tmp_idx = tmp(proj.l, cfg.layer_index)

    s_term = S if cfg.uses_smp else None
    l_term = L if cfg.uses_lmp else None
    if path == "naive":
        p = fuse_naive(global_term, s_term, l_term, proj.o, seg, counter, T)
    else:
        p = _fuse_fused(global_term, s_term, l_term, proj.o, seg, counter, T)
    ensure_finite(p, "mixer")

    diag = _diagnostics(g, g_prime, global_term, S, L, T, proj.o, seg, cfg) if diagnostics else None
    tape = None
    if keep_tape:
        tape = BlockTape(
            path=path,
            cfg=cfg,
            seg=seg,
            params=params,
            h=h,
            proj=proj,
            h_mean=h_mean,
            g=g,
            g_prime=g_prime,
            attn=attn,
            smp_values=S,
            smp_idx=smp_idx,
            lmp_values=L,
            lmp_idx=lmp_idx,
            tmp_values=T,
            tmp_idx=tmp_idx,
            out=p,
        )
    return MixerOutput(p=p, diagnostics=diag, tape=tape)


def mix_naive(
    h: np.ndarray,
    params: ProjectionSet,
    seg: SegmentMap,
    cfg: MixerConfig,
    counter: Optional[OpCounter] = None,
    diagnostics: bool = False,
    keep_tape: bool = False,
) -> MixerOutput:
    """
    project_all -> GA (two stages) -> SMP -> LMP -> fuse_naive, literally.
    """
    return _forward(h, params, seg, cfg, "naive", counter, diagnostics, keep_tape)


def mix_fused(
    h: np.ndarray,
    params: ProjectionSet,
    seg: SegmentMap,
    cfg: MixerConfig,
    counter: Optional[OpCounter] = None,
    diagnostics: bool = False,
    keep_tape: bool = False,
) -> MixerOutput:
    """
    Reordered block: g = affine(mean(H)) and P = (g' + S[k(n)]) * H_o + L.
    Same function as mix_naive with (5N+1)d^2 + 3Nd multiplications.
    """
    return _forward(h, params, seg, cfg, "fused", counter, diagnostics, keep_tape)


def mix(
    h: np.ndarray,
    params: ProjectionSet,
    seg: SegmentMap,
    cfg: MixerConfig,
    path: Path = "fused",
    counter: Optional[OpCounter] = None,
    diagnostics: bool = False,
    keep_tape: bool = False,
) -> MixerOutput:
    return _forward(h, params, seg, cfg, path, counter, diagnostics, keep_tape)


def count_mults(n: int, d: int, path: Path, share_kv: bool = False) -> int:
    """
    Closed-form multiplication count of the full block.
    naive: 6Nd^2 + 4Nd; fused: (5N+1)d^2 + 3Nd. A shared key/value
    projection is computed once, saving Nd^2.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    if path == "naive":
        total = 6 * n * d * d + 4 * n * d
    else:
        total = (5 * n + 1) * d * d + 3 * n * d
    if share_kv:
        total -= n * d * d
    return total


def count_attention_mults(n: int, d: int) -> int:
    # Q, K, V, output projections plus scores and weighted sum
    return 4 * n * d * d + 2 * n * n * d
