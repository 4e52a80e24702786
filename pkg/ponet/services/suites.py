# ponet/services/suites.py: verification suites behind `ponet check`
from __future__ import annotations

import logging
import time
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..models.api import CheckConfig, CheckReport, SuiteName, SuiteResult
from ..models.domain import VARIANTS, EncoderConfig, MixerConfig, ProjectionSet
from .bench import footprint, init_attention, quadratic_tensors, self_attention_forward
from .causal_stream import causal_forward_batch, leakage_probe, run_stream
from .encoder import init_encoder
from .grad_check import check_encoder_gradients
from .mix_block import count_attention_mults, count_mults, init_projections, mix_fused, mix_naive
from .segmentation import segment_even
from .tensor_core import OpCounter, make_rng

logger = logging.getLogger(__name__)

SuiteOutcome = Tuple[int, List[str], Optional[float]]

HEAD_CHOICES = (1, 2, 4)


# values below this magnitude are compared absolutely
EQUIV_FLOOR = 1e-4


def scaled_rel_diff(a: np.ndarray, b: np.ndarray, floor: float = EQUIV_FLOOR) -> float:
    """
    Largest elementwise |a - b| / max(|a|, |b|, floor).
    """
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def _corrupt(params: ProjectionSet) -> ProjectionSet:
    return params.model_copy(update={"w_o": params.w_o + 1e-3})


def fused_vs_naive_suite(cfg: CheckConfig, rng: np.random.Generator) -> SuiteOutcome:
    failures: List[str] = []
    worst = 0.0
    for i in range(cfg.equivalence_instances):
        n = int(rng.integers(1, 65))
        heads = int(rng.choice(HEAD_CHOICES))
        d = heads * int(rng.integers(1, 32 // heads + 1))
        k = int(rng.integers(1, min(8, n) + 1))
        share_kv = bool(rng.integers(2))
        mixer = MixerConfig(d=d, heads=heads, share_kv=share_kv, variant=VARIANTS[i % len(VARIANTS)])
        params = init_projections(d, rng, share_kv=share_kv)
        h = rng.normal(0.0, 1.0, size=(n, d))
        seg = segment_even(n, k)
        naive = mix_naive(h, params, seg, mixer).p
        fused_params = _corrupt(params) if cfg.fault_injection == "corrupt_projection" else params
        fused = mix_fused(h, fused_params, seg, mixer).p
        err = scaled_rel_diff(fused, naive)
        worst = max(worst, err)
        if err > cfg.equivalence_tol:
            failures.append(f"instance {i} (N={n}, d={d}, K={k}, heads={heads}, {mixer.variant}): {err:.3e}")
    return cfg.equivalence_instances, failures, worst


def op_count_suite(cfg: CheckConfig, rng: np.random.Generator) -> SuiteOutcome:
    failures: List[str] = []
    cases = 0
    for n in cfg.op_count_lengths:
        for d in cfg.op_count_dims:
            h = rng.normal(0.0, 1.0, size=(n, d))
            seg = segment_even(n, min(4, n))
            for share_kv in (False, True):
                mixer = MixerConfig(d=d, share_kv=share_kv)
                params = init_projections(d, rng, share_kv=share_kv)
                for path, run in (("naive", mix_naive), ("fused", mix_fused)):
                    counter = OpCounter()
                    run(h, params, seg, mixer, counter=counter)
                    expected = count_mults(n, d, path, share_kv=share_kv)
                    cases += 1
                    if counter.mults != expected:
                        failures.append(f"{path} N={n} d={d} share_kv={share_kv}: {counter.mults} != {expected}")
            if n <= 64:
                counter = OpCounter()
                self_attention_forward(h, init_attention(d, rng), 1, counter)
                cases += 1
                if counter.mults != count_attention_mults(n, d):
                    failures.append(f"self_attention N={n} d={d}: {counter.mults} != {count_attention_mults(n, d)}")
    for mixer_name in ("ponet_naive", "ponet_fused"):
        cases += 1
        quadratic = quadratic_tensors(mixer_name, 512, 64, 2, 1, 8)
        if quadratic:
            failures.append(f"{mixer_name} footprint holds N x N tensors: {quadratic}")
    cases += 1
    if not quadratic_tensors("self_attention", 512, 64, 2, 1, 8):
        failures.append("self_attention footprint lacks its score matrix")
    logger.debug("footprint audit over %d tensors", len(footprint("ponet_fused", 512, 64, 2, 1, 8)))
    return cases, failures, None


def gradient_suite(cfg: CheckConfig, rng: np.random.Generator) -> SuiteOutcome:
    failures: List[str] = []
    worst = 0.0
    n, d, k = 6, 4, 2
    for i in range(cfg.grad_seeds):
        share_kv = i % 2 == 0
        enc = EncoderConfig(
            vocab_size=16,
            max_len=n,
            d=d,
            layers=1,
            dropout_rate=0.0,
            mixer=MixerConfig(d=d, share_kv=share_kv, variant=VARIANTS[i % len(VARIANTS)]),
            head="max_pool" if i % 4 < 2 else "cls_token",
        )
        seed_rng = make_rng(int(rng.integers(2**31)))
        params = init_encoder(enc, seed_rng)
        tokens = [int(t) for t in seed_rng.integers(0, enc.vocab_size, size=n)]
        label = int(seed_rng.integers(enc.num_classes))
        path = "naive" if i % 3 == 0 else "fused"
        report = check_encoder_gradients(
            tokens, segment_even(n, k), label, params, enc, h=cfg.fd_step, tol=cfg.grad_tol, path=path
        )
        worst = max(worst, report.max_rel_err)
        if not report.passed:
            bad = [p.name for p in report.params if p.failing]
            failures.append(f"seed {i} ({enc.mixer.variant}, {path}): {bad}")
    return cfg.grad_seeds, failures, worst


def causal_suite(cfg: CheckConfig, rng: np.random.Generator) -> SuiteOutcome:
    failures: List[str] = []
    worst = 0.0
    d = 8
    t = cfg.stream_length
    for i in range(cfg.causal_streams):
        mixer = MixerConfig(d=d, variant="no_ss_ga", lmp_window=int(rng.choice((1, 3, 5))))
        params = init_projections(d, rng, share_kv=mixer.share_kv)
        rows = rng.normal(0.0, 1.0, size=(t, d))
        flags = list(rng.random(t) < 0.1)
        streamed = run_stream(rows, flags, params, mixer)
        oracle = causal_forward_batch(rows, flags, params, mixer)
        err = float(np.max(np.abs(streamed - oracle))) / max(1.0, float(np.max(np.abs(oracle))))
        worst = max(worst, err)
        if err > 1e-12:
            failures.append(f"stream {i}: streamed vs prefix recomputation differ by {err:.3e}")
    for j in range(cfg.leakage_probes):
        mixer = MixerConfig(d=d, variant="no_ss_ga")
        params = init_projections(d, rng)
        rows = rng.normal(0.0, 1.0, size=(t, d))
        t_perturb = int(rng.integers(2, t + 1))
        t_check = int(rng.integers(1, t_perturb))
        report = leakage_probe(rows, t_perturb, t_check, params, mixer, rng)
        if report.leaked:
            failures.append(f"leakage case {j}: perturbing t={t_perturb} changed outputs at {report.violations}")
    return cfg.causal_streams + cfg.leakage_probes, failures, worst


SUITES: Dict[SuiteName, Callable[[CheckConfig, np.random.Generator], SuiteOutcome]] = {
    "fused_vs_naive": fused_vs_naive_suite,
    "op_count": op_count_suite,
    "gradient": gradient_suite,
    "causal": causal_suite,
}


def run_check(cfg: CheckConfig, precision: str = "f64") -> CheckReport:
    """
    Runs the selected suites at 64-bit precision and collects a report.
    """
    if precision != "f64":
        logger.warning("check suites always run at f64; requested %s ignored", precision)
    results: List[SuiteResult] = []
    for offset, name in enumerate(cfg.suites):
        logger.info("suite %s: start", name)
        start = time.perf_counter()
        cases, failures, max_error = SUITES[name](cfg, make_rng(cfg.seed + offset))
        seconds = time.perf_counter() - start
        result = SuiteResult(
            name=name,
            passed=not failures,
            cases=cases,
            failures=failures,
            max_error=max_error,
            seconds=seconds,
        )
        results.append(result)
        logger.info("suite %s: %s (%d cases, %.2fs)", name, "passed" if result.passed else "FAILED", cases, seconds)
    return CheckReport(
        passed=all(r.passed for r in results),
        seed=cfg.seed,
        precision="f64",
        suites=results,
    )
