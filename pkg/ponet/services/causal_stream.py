# ponet/services/causal_stream.py: streaming causal block (no second-stage GA)
from __future__ import annotations

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError, InputError
from ..models.domain import (
    CausalState,
    EncoderConfig,
    EncoderParams,
    LeakageReport,
    MixerConfig,
    ProjectionSet,
    SegmentMap,
)
from .tensor_core import affine, ensure_finite, gelu, hadamard, layer_norm, reduce_mean

logger = logging.getLogger(__name__)

STREAM_PROJECTIONS = ("qg", "s", "l", "o")


def _check_streamable(cfg: MixerConfig) -> None:
    if cfg.variant != "no_ss_ga":
        raise ConfigError(
            f"variant '{cfg.variant}' cannot stream: second-stage GA attends over the whole "
            "prefix, so each new token costs O(t); use variant 'no_ss_ga'"
        )
    if cfg.tmp_enabled:
        raise ConfigError("tree max-pooling has no causal form; disable tmp_enabled to stream")


def project_token(row: np.ndarray, params: ProjectionSet) -> Dict[str, np.ndarray]:
    """
    Per-token projections used by both the stream and its batch oracle.
    """
    return {name: affine(row, getattr(params, f"w_{name}"), getattr(params, f"b_{name}")) for name in STREAM_PROJECTIONS}


def stream_init(params: ProjectionSet, cfg: MixerConfig) -> CausalState:
    _check_streamable(cfg)
    dtype = params.w_qg.dtype
    return CausalState(
        t=0,
        running_mean=np.zeros(cfg.d, dtype=dtype),
        seg_running_max=np.full(cfg.d, -np.inf, dtype=dtype),
        current_segment=0,
        lmp_buffer=(),
        window=cfg.lmp_window,
    )


def stream_step(
    state: CausalState,
    token_row: np.ndarray,
    segment_boundary: bool,
    params: ProjectionSet,
    cfg: MixerConfig,
) -> Tuple[np.ndarray, CausalState]:
    """
    Fold one token into the running state and emit its output row.
    Cost is independent of t: four row projections plus O(window * d).
    """
    ensure_finite(token_row, "stream_step")
    proj = project_token(token_row, params)
    t = state.t
    mean = (t * state.running_mean + proj["qg"]) / (t + 1)

    # a boundary on the very first token opens nothing new
    if segment_boundary and t > 0:
        seg_max = proj["s"]
        current = state.current_segment + 1
    else:
        seg_max = np.maximum(state.seg_running_max, proj["s"])
        current = state.current_segment

    local = np.max(np.stack(state.lmp_buffer + (proj["l"],)), axis=0)
    p = hadamard(mean, proj["o"]) + hadamard(seg_max, proj["o"]) + local
    keep = state.window - 1
    buffer = (state.lmp_buffer + (proj["l"],))[-keep:] if keep > 0 else ()
    return p, CausalState(
        t=t + 1,
        running_mean=mean,
        seg_running_max=seg_max,
        current_segment=current,
        lmp_buffer=buffer,
        window=state.window,
    )


def boundary_flags(seg: SegmentMap) -> List[bool]:
    starts = set(seg.boundaries[1:])
    return [n in starts for n in range(seg.n_tokens)]


def run_stream(
    rows: np.ndarray,
    boundaries: Optional[Sequence[bool]],
    params: ProjectionSet,
    cfg: MixerConfig,
) -> np.ndarray:
    flags = list(boundaries) if boundaries is not None else [False] * len(rows)
    if len(flags) != len(rows):
        raise InputError(f"{len(flags)} boundary flags for {len(rows)} rows")
    state = stream_init(params, cfg)
    out = []
    for row, flag in zip(rows, flags):
        p, state = stream_step(state, row, flag, params, cfg)
        out.append(p)
    return np.stack(out) if out else np.empty((0, cfg.d))


def causal_forward_batch(
    rows: np.ndarray,
    boundaries: Optional[Sequence[bool]],
    params: ProjectionSet,
    cfg: MixerConfig,
) -> np.ndarray:
    """
    Oracle: recompute every output from its prefix alone (mean over the
    prefix, max over the open segment, max over the causal window).
    """
    _check_streamable(cfg)
    n = len(rows)
    flags = list(boundaries) if boundaries is not None else [False] * n
    projected = [project_token(r, params) for r in rows]
    q = np.stack([p["qg"] for p in projected])
    s = np.stack([p["s"] for p in projected])
    l = np.stack([p["l"] for p in projected])
    o = np.stack([p["o"] for p in projected])
    out = np.empty_like(q)
    start = 0
    for t in range(n):
        if flags[t] and t > 0:
            start = t
        g = reduce_mean(q[: t + 1], axis=0)
        seg_max = np.max(s[start: t + 1], axis=0)
        local = np.max(l[max(0, t - cfg.lmp_window + 1): t + 1], axis=0)
        out[t] = g * o[t] + seg_max * o[t] + local
    return out


def leakage_probe(
    rows: np.ndarray,
    t_perturb: int,
    t_check: int,
    params: ProjectionSet,
    cfg: MixerConfig,
    rng: np.random.Generator,
    boundaries: Optional[Sequence[bool]] = None,
    scale: float = 1.0,
) -> LeakageReport:
    """
    Perturb the token at 1-based position t_perturb and confirm that
    emissions 1..t_check are unchanged.
    """
    total = len(rows)
    if not 1 <= t_check < t_perturb <= total:
        raise InputError(f"need 1 <= t_check ({t_check}) < t_perturb ({t_perturb}) <= {total}")
    base = run_stream(rows, boundaries, params, cfg)
    perturbed_rows = rows.copy()
    perturbed_rows[t_perturb - 1] = perturbed_rows[t_perturb - 1] + rng.normal(0.0, scale, size=rows.shape[1])
    perturbed = run_stream(perturbed_rows, boundaries, params, cfg)
    diff = np.abs(base[:t_check] - perturbed[:t_check])
    violations = [int(t) + 1 for t in np.nonzero(np.any(diff > 1e-12, axis=1))[0]]
    if violations:
        logger.warning("leakage detected at positions %s", violations)
    return LeakageReport(
        t_perturb=t_perturb,
        t_check=t_check,
        max_abs_diff=float(diff.max()) if diff.size else 0.0,
        violations=violations,
    )


class EncoderStream:
    """
    Token-by-token encoder: one CausalState per layer, each followed by the
    per-token residual, LayerNorm and FFN sublayers. Eval mode only.
    """

    def __init__(self, params: EncoderParams, cfg: EncoderConfig) -> None:
        self.params = params
        self.cfg = cfg
        self.states = [
            stream_init(layer.mix, cfg.mixer_for_layer(i)) for i, layer in enumerate(params.layers)
        ]
        self.t = 0

    def step(self, token_id: int, segment_boundary: bool = False) -> np.ndarray:
        if not 0 <= token_id < self.cfg.vocab_size:
            raise InputError(f"token id {token_id} outside [0, {self.cfg.vocab_size})")
        if self.t >= self.cfg.max_len:
            raise InputError(f"stream exceeds max_len={self.cfg.max_len}")
        h = self.params.tok_emb[token_id] + self.params.pos_emb[self.t]
        for i, layer in enumerate(self.params.layers):
            p, self.states[i] = stream_step(self.states[i], h, segment_boundary, layer.mix, self.cfg.mixer_for_layer(i))
            h1, _, _ = layer_norm(h + p, layer.ln1_g, layer.ln1_b)
            f = affine(gelu(affine(h1, layer.ffn_w1, layer.ffn_b1)), layer.ffn_w2, layer.ffn_b2)
            h, _, _ = layer_norm(h1 + f, layer.ln2_g, layer.ln2_b)
        self.t += 1
        return h
