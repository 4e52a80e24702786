# ponet/services/tasks.py: seeded synthetic classification tasks
from __future__ import annotations

import logging
from typing import List, Sequence

import numpy as np

from ..errors import ConfigError
from ..models.domain import Example, SegmentMap, TaskKind, TaskSpec
from .segmentation import segment_even
from .tensor_core import make_rng

logger = logging.getLogger(__name__)

PARITY_MARKER = 1
# upper bound on marker pairs, and separately on lone markers, per parity example
PARITY_MAX_BLOCKS = 3
# share of a positive duplicate_detect sequence taken by the repeated token
DUPLICATE_SHARE = 0.25
EVAL_SEED_OFFSET = 1_000_003


def relabel(kind: TaskKind, tokens: Sequence[int], seg: SegmentMap) -> int:
    """
    Oracle labels recomputed from the inputs alone.

    duplicate_detect: 1 if any token repeats.
    segment_max_id: segment holding the first occurrence of the largest token.
    parity: number of adjacent PARITY_MARKER pairs (positions n with
    tokens[n] == tokens[n + 1] == PARITY_MARKER) mod 2.
    """
    if kind == "duplicate_detect":
        return int(len(set(tokens)) < len(tokens))
    if kind == "segment_max_id":
        return seg.segment_of(int(np.argmax(tokens)))
    return sum(1 for a, b in zip(tokens, tokens[1:]) if a == b == PARITY_MARKER) % 2


def _check_spec(spec: TaskSpec) -> None:
    if spec.kind == "duplicate_detect" and spec.vocab < spec.length:
        raise ConfigError(
            f"duplicate_detect needs vocab >= length for duplicate-free sampling "
            f"(vocab={spec.vocab}, length={spec.length})"
        )
    if spec.kind == "parity" and spec.vocab <= PARITY_MARKER + 1:
        raise ConfigError(f"parity needs vocab > {PARITY_MARKER + 1}, got {spec.vocab}")
    if spec.segments > spec.length:
        raise ConfigError(f"segments={spec.segments} exceeds length={spec.length}")


def duplicate_copies(length: int) -> int:
    return max(2, int(round(DUPLICATE_SHARE * length)))


def _duplicate_tokens(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    """
    Distinct tokens; with probability 0.5 one of them is copied over
    duplicate_copies(length) - 1 other positions.
    """
    tokens = rng.choice(spec.vocab, size=spec.length, replace=False)
    copies = min(duplicate_copies(spec.length), spec.length)
    if copies > 1 and rng.random() < 0.5:
        positions = rng.choice(spec.length, size=copies, replace=False)
        tokens[positions[1:]] = tokens[positions[0]]
    return tokens


def _segment_max_tokens(spec: TaskSpec, seg: SegmentMap, rng: np.random.Generator) -> np.ndarray:
    tokens = rng.integers(0, spec.vocab - 1, size=spec.length)
    target = int(rng.integers(seg.k))
    start, end = seg.boundaries[target], (seg.boundaries + (seg.n_tokens,))[target + 1]
    tokens[int(rng.integers(start, end))] = spec.vocab - 1
    return tokens


def _parity_tokens(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    """
    Marker pairs and lone markers, each block separated from the next by
    at least one unmarked token. Blocks that no longer fit are dropped.
    """
    tokens = rng.integers(PARITY_MARKER + 1, spec.vocab, size=spec.length)
    pairs = int(rng.integers(0, PARITY_MAX_BLOCKS + 1))
    singles = int(rng.integers(0, PARITY_MAX_BLOCKS + 1))
    blocked = np.zeros(spec.length, dtype=bool)
    for width in rng.permutation([2] * pairs + [1] * singles):
        starts = [s for s in range(spec.length - width + 1) if not blocked[s:s + width].any()]
        if not starts:
            continue
        s = int(rng.choice(starts))
        tokens[s:s + width] = PARITY_MARKER
        blocked[max(0, s - 1):s + width + 1] = True
    return tokens


def gen_task(spec: TaskSpec) -> List[Example]:
    """
    Deterministic dataset of spec.size examples under spec.seed.
    """
    _check_spec(spec)
    rng = make_rng(spec.seed)
    seg = segment_even(spec.length, spec.segments)
    examples: List[Example] = []
    for _ in range(spec.size):
        if spec.kind == "duplicate_detect":
            tokens = _duplicate_tokens(spec, rng)
        elif spec.kind == "segment_max_id":
            tokens = _segment_max_tokens(spec, seg, rng)
        else:
            tokens = _parity_tokens(spec, rng)
        ids = tuple(int(t) for t in tokens)
        examples.append(Example(tokens=ids, seg=seg, label=relabel(spec.kind, ids, seg)))
    logger.debug("generated %d %s examples (seed=%d)", spec.size, spec.kind, spec.seed)
    return examples


def eval_spec(spec: TaskSpec, size: int) -> TaskSpec:
    # held-out split: same task, disjoint seed
    return spec.model_copy(update={"seed": spec.seed + EVAL_SEED_OFFSET, "size": size})
