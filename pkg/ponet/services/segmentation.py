# ponet/services/segmentation.py: SegmentMap construction policies
from __future__ import annotations

from typing import Iterable, List, Sequence

from ..errors import EmptySequenceError, InvalidSegmentCountError, SegmentIndexError
from ..models.domain import SegmentMap


def segment_even(n_tokens: int, k: int) -> SegmentMap:
    """
    Split n_tokens into k contiguous segments whose lengths differ by at most
    one; the first n_tokens mod k segments take the extra token.
    """
    if k < 1 or k > n_tokens:
        raise InvalidSegmentCountError(f"k={k} must be in [1, n_tokens={n_tokens}]")
    base, extra = divmod(n_tokens, k)
    ids: List[int] = []
    for sid in range(k):
        ids.extend([sid] * (base + (1 if sid < extra else 0)))
    return SegmentMap.from_ids(ids)


def segment_whole(n_tokens: int) -> SegmentMap:
    return segment_even(n_tokens, 1)


def segment_by_separators(tokens: Sequence[int], cls_id: int, sep_id: int) -> SegmentMap:
    """
    A leading CLS and every SEP are single-token segments; each maximal run
    of other tokens between them forms one segment.
    """
    if not tokens:
        raise EmptySequenceError("segment_by_separators: empty token sequence")
    ids: List[int] = []
    sid = -1
    in_run = False
    for n, tok in enumerate(tokens):
        special = tok == sep_id or (n == 0 and tok == cls_id)
        if special or not in_run:
            sid += 1
        in_run = not special
        ids.append(sid)
    return SegmentMap.from_ids(ids)


def segment_by_markers(marker_positions: Iterable[int], n_tokens: int) -> SegmentMap:
    """
    Break segments immediately after each marker position.
    """
    if n_tokens < 1:
        raise EmptySequenceError("segment_by_markers: n_tokens must be >= 1")
    breaks = set()
    for m in marker_positions:
        if not 0 <= m < n_tokens:
            raise SegmentIndexError(f"marker {m} outside [0, {n_tokens})")
        breaks.add(m)
    ids: List[int] = []
    sid = 0
    for n in range(n_tokens):
        ids.append(sid)
        # a marker on the last token closes nothing
        if n in breaks and n + 1 < n_tokens:
            sid += 1
    return SegmentMap.from_ids(ids)
