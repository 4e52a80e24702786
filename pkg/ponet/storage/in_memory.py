# ponet/storage/in_memory.py: In-memory dataset cache
from __future__ import annotations

from typing import Dict, List

from ..models.domain import Example, TaskSpec
from ..services.tasks import gen_task


# Datasets keyed by the TaskSpec that regenerates them
DATASETS: Dict[TaskSpec, List[Example]] = {}


def get_or_create_dataset(spec: TaskSpec) -> List[Example]:
    existing = DATASETS.get(spec)
    if existing is not None:
        return existing
    dataset = gen_task(spec)
    DATASETS[spec] = dataset
    return dataset


def clear_datasets() -> None:
    DATASETS.clear()
