# ponet/services/bench.py: forward-pass scaling benchmark against self-attention
from __future__ import annotations

import logging
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path as FsPath
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..config import Settings, dtype_for, get_settings
from ..errors import BudgetExceededError, InputError
from ..models.domain import (
    AttentionParams,
    BenchReport,
    BenchRow,
    BenchSpec,
    MixerConfig,
    MixerName,
    ProjectionSet,
    RefusedCell,
    ScalingFit,
    SegmentMap,
)
from .mix_block import init_projections, mix
from .segmentation import segment_even
from .tensor_core import OpCounter, affine, make_rng, matmul, softmax

logger = logging.getLogger(__name__)

CSV_FIELDS = ("mixer", "length", "d", "heads", "batch", "median_seconds", "est_bytes", "mult_count")

Shape = Tuple[int, ...]


def init_attention(d: int, rng: np.random.Generator, dtype: np.dtype = np.float64) -> AttentionParams:
    std = 1.0 / math.sqrt(d)
    arrays = {}
    for name in ("q", "k", "v", "o"):
        arrays[f"w_{name}"] = rng.normal(0.0, std, size=(d, d)).astype(dtype)
        arrays[f"b_{name}"] = np.zeros(d, dtype=dtype)
    return AttentionParams(**arrays)


def self_attention_forward(
    h: np.ndarray, params: AttentionParams, heads: int, counter: Optional[OpCounter] = None
) -> np.ndarray:
    """
    Reference quadratic mixer: softmax(Q K^T / sqrt(d_h)) V, then the output map.
    Materializes the (heads, N, N) score matrix.
    """
    n, d = h.shape
    dh = d // heads
    q = affine(h, params.w_q, params.b_q, counter).reshape(n, heads, dh).transpose(1, 0, 2)
    k = affine(h, params.w_k, params.b_k, counter).reshape(n, heads, dh).transpose(1, 2, 0)
    v = affine(h, params.w_v, params.b_v, counter).reshape(n, heads, dh).transpose(1, 0, 2)
    scores = matmul(q, k, counter) * (1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    context = matmul(weights, v, counter).transpose(1, 0, 2).reshape(n, d)
    return affine(context, params.w_o, params.b_o, counter)


def footprint(
    mixer: MixerName, n: int, d: int, heads: int, batch: int, k: int, in_flight: int = 1
) -> List[Tuple[str, Shape]]:
    """
    Tensors simultaneously live at the peak of a forward pass: the whole
    input batch plus the intermediates of `in_flight` concurrent sequences.
    """
    m = in_flight
    if mixer == "self_attention":
        return [
            ("weights", (4, d, d)),
            ("inputs", (batch, n, d)),
            ("q", (m, n, d)),
            ("k", (m, n, d)),
            ("v", (m, n, d)),
            ("scores", (m, heads, n, n)),
            ("attn", (m, heads, n, n)),
            ("context", (m, n, d)),
            ("out", (m, n, d)),
        ]
    tensors: List[Tuple[str, Shape]] = [
        ("weights", (6, d, d)),
        ("inputs", (batch, n, d)),
    ]
    if mixer == "ponet_naive":
        tensors.append(("h_qg", (m, n, d)))
    tensors += [
        ("h_kg", (m, n, d)),
        ("h_vg", (m, n, d)),
        ("h_s", (m, n, d)),
        ("h_l", (m, n, d)),
        ("h_o", (m, n, d)),
        ("ga_weights", (m, heads, n)),
        ("smp", (m, k, d)),
        ("lmp", (m, n, d)),
        ("out", (m, n, d)),
    ]
    return tensors


def est_bytes(tensors: Sequence[Tuple[str, Shape]], itemsize: int) -> int:
    return int(sum(math.prod(shape) for _, shape in tensors)) * itemsize


def quadratic_tensors(mixer: MixerName, n: int, d: int, heads: int, batch: int, k: int) -> List[str]:
    """
    Names of live tensors whose size grows at least fourfold when N doubles.
    """
    small = dict(footprint(mixer, n, d, heads, batch, k))
    large = dict(footprint(mixer, 2 * n, d, heads, batch, k))
    return [name for name, shape in small.items() if math.prod(large[name]) >= 4 * math.prod(shape)]


def check_budget(mixer: MixerName, n: int, estimate: int, budget: int) -> None:
    if estimate > budget:
        raise BudgetExceededError(
            f"{mixer} at N={n} needs ~{estimate} bytes, over the {budget}-byte budget"
        )


def _build_forward(
    mixer: MixerName, spec: BenchSpec, seg: SegmentMap, dtype: np.dtype, rng: np.random.Generator
) -> Tuple[Callable[[np.ndarray, Optional[OpCounter]], np.ndarray], Callable[[np.ndarray, Optional[OpCounter]], np.ndarray]]:
    """
    Returns (one block, the full layer stack) as callables over one sequence.
    """
    if mixer == "self_attention":
        stack = [init_attention(spec.d, rng, dtype) for _ in range(spec.layers)]

        def block(h: np.ndarray, counter: Optional[OpCounter]) -> np.ndarray:
            return self_attention_forward(h, stack[0], spec.heads, counter)

        def forward(h: np.ndarray, counter: Optional[OpCounter]) -> np.ndarray:
            for p in stack:
                h = self_attention_forward(h, p, spec.heads, counter)
            return h

        return block, forward

    path = "naive" if mixer == "ponet_naive" else "fused"
    # unshared K/V so counts follow the six-projection closed form
    cfg = MixerConfig(d=spec.d, heads=spec.heads, share_kv=False)
    layers: List[ProjectionSet] = [init_projections(spec.d, rng, share_kv=cfg.share_kv, dtype=dtype) for _ in range(spec.layers)]

    def block(h: np.ndarray, counter: Optional[OpCounter]) -> np.ndarray:
        return mix(h, layers[0], seg, cfg, path=path, counter=counter).p

    def forward(h: np.ndarray, counter: Optional[OpCounter]) -> np.ndarray:
        for p in layers:
            h = mix(h, p, seg, cfg, path=path, counter=counter).p
        return h

    return block, forward


def _time_iters(run: Callable[[], None], warmup: int, measured: int) -> float:
    for _ in range(warmup):
        run()
    samples = []
    for _ in range(measured):
        start = time.perf_counter()
        run()
        samples.append(time.perf_counter() - start)
    # clocks with coarse resolution can report zero
    return max(statistics.median(samples), 1e-9)


def run_bench(spec: BenchSpec, settings: Optional[Settings] = None) -> BenchReport:
    """
    Forward-only timing of each (mixer, length) cell over a batch of random
    sequences. Cells over the memory budget are refused and not run.
    """
    settings = settings or get_settings()
    dtype = dtype_for(spec.precision)
    rng = make_rng(spec.seed)
    report = BenchReport(rows=[])
    for n in spec.lengths:
        seg = segment_even(n, min(spec.segments, n))
        x = rng.normal(0.0, 1.0, size=(spec.batch, n, spec.d)).astype(dtype)
        for mixer in spec.mixers:
            in_flight = spec.batch if spec.parallel else 1
            tensors = footprint(mixer, n, spec.d, spec.heads, spec.batch, seg.k, in_flight)
            estimate = est_bytes(tensors, dtype.itemsize)
            try:
                check_budget(mixer, n, estimate, settings.mem_budget_bytes)
            except BudgetExceededError as e:
                logger.warning("refused cell: %s", e)
                report.refused.append(
                    RefusedCell(mixer=mixer, length=n, est_bytes=estimate, budget_bytes=settings.mem_budget_bytes)
                )
                continue

            block, forward = _build_forward(mixer, spec, seg, dtype, rng)
            counter = OpCounter()
            block(x[0], counter)

            def sequential() -> None:
                for item in x:
                    forward(item, None)

            seconds = _time_iters(sequential, spec.warmup_iters, spec.measured_iters)
            row = BenchRow(
                mixer=mixer,
                length=n,
                d=spec.d,
                heads=spec.heads,
                batch=spec.batch,
                median_seconds=seconds,
                est_bytes=estimate,
                mult_count=counter.mults,
            )
            report.rows.append(row)
            logger.info("bench %s N=%d: %.6fs, %d bytes, %d mults", mixer, n, seconds, estimate, counter.mults)

            if spec.parallel:
                with ThreadPoolExecutor() as pool:

                    def parallel() -> None:
                        list(pool.map(lambda item: forward(item, None), x))

                    p_seconds = _time_iters(parallel, spec.warmup_iters, spec.measured_iters)
                report.parallel_rows.append(row.model_copy(update={"median_seconds": p_seconds}))
    return report


def write_rows_csv(rows: Sequence[BenchRow], path: FsPath) -> FsPath:
    path = FsPath(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([row.model_dump() for row in rows], columns=list(CSV_FIELDS)).to_csv(path, index=False)
    return path


def read_rows_csv(path: FsPath) -> List[BenchRow]:
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise InputError(f"{path}: {e}") from e
    if tuple(frame.columns) != CSV_FIELDS:
        raise InputError(f"{path}: expected header {','.join(CSV_FIELDS)}")
    return [BenchRow.model_validate(record) for record in frame.to_dict(orient="records")]


def scaling_report(rows: Sequence[BenchRow]) -> List[ScalingFit]:
    """
    Per mixer: least-squares slope of log(time) against log(N), and the
    time ratio of each adjacent pair of lengths.
    """
    by_mixer: Dict[str, List[BenchRow]] = {}
    for row in rows:
        by_mixer.setdefault(row.mixer, []).append(row)
    fits: List[ScalingFit] = []
    for mixer, group in by_mixer.items():
        group = sorted(group, key=lambda r: r.length)
        lengths = [r.length for r in group]
        if len(set(lengths)) < 3 or len(set(lengths)) != len(lengths):
            raise InputError(f"{mixer}: scaling needs >= 3 distinct lengths, got {lengths}")
        times = np.array([r.median_seconds for r in group])
        slope, _ = np.polyfit(np.log(lengths), np.log(times), 1)
        ratios = [
            (a.length, b.length, b.median_seconds / a.median_seconds) for a, b in zip(group, group[1:])
        ]
        fits.append(ScalingFit(mixer=mixer, exponent=float(slope), ratios=ratios))
    if not fits:
        raise InputError("scaling_report: no rows")
    return fits
