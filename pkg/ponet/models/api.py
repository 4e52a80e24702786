# ponet/models/api.py: CLI config and report models
from __future__ import annotations

from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from .domain import BenchSpec, Head, Path, TaskSpec, TrainConfig, Variant

Subcommand = Literal["check", "bench", "train", "stream", "norms"]
SuiteName = Literal["fused_vs_naive", "op_count", "gradient", "causal"]
FaultKind = Literal["corrupt_projection"]

ALL_SUITES: List[SuiteName] = ["fused_vs_naive", "op_count", "gradient", "causal"]

_STRICT = ConfigDict(extra="forbid")


class RunConfig(BaseModel):
    model_config = _STRICT

    subcommand: Subcommand
    config_path: Optional[str] = None
    seed: int = Field(0, ge=0, lt=2**64)
    precision: Literal["f32", "f64"] = "f64"
    out: Optional[str] = None


class CheckConfig(BaseModel):
    model_config = _STRICT

    suites: List[SuiteName] = Field(default_factory=lambda: list(ALL_SUITES))
    seed: int = 0
    equivalence_instances: int = Field(200, ge=1)
    equivalence_tol: float = 1e-10
    op_count_lengths: List[int] = Field(default_factory=lambda: [1, 7, 64, 512])
    op_count_dims: List[int] = Field(default_factory=lambda: [1, 8, 64])
    grad_seeds: int = Field(20, ge=1)
    grad_tol: float = 1e-4
    fd_step: float = 1e-5
    causal_streams: int = Field(20, ge=1)
    stream_length: int = Field(64, ge=2)
    leakage_probes: int = Field(50, ge=0)
    fault_injection: Optional[FaultKind] = Field(
        None, description="Debug hook: corrupt a projection on the fused path only"
    )


class BenchConfig(BenchSpec):
    """
    bench subcommand config: every BenchSpec field, strictly parsed.
    """


class TrainRunConfig(BaseModel):
    model_config = _STRICT

    task: TaskSpec = Field(default_factory=lambda: TaskSpec(kind="duplicate_detect"))
    train: TrainConfig = Field(default_factory=TrainConfig)
    d: int = Field(32, ge=1)
    layers: int = Field(2, ge=1)
    heads: int = Field(1, ge=1)
    variant: Variant = "full"
    dropout_rate: float = Field(0.1, ge=0.0, lt=1.0)
    head: Head = "max_pool"
    path: Path = "fused"
    save_checkpoint: bool = False


class StreamConfig(BaseModel):
    model_config = _STRICT

    input: str
    mode: Literal["rows", "tokens"] = "rows"
    d: int = Field(16, ge=1, description="Row width in rows mode")
    layers: int = Field(1, ge=1)
    vocab: int = Field(128, ge=1)
    max_len: int = Field(4096, ge=1)
    lmp_window: int = 3
    checkpoint: Optional[str] = None
    seed: int = 0


class NormsConfig(BaseModel):
    model_config = _STRICT

    runs: int = Field(8, ge=1)
    length: int = Field(64, ge=1)
    vocab: int = Field(128, ge=2)
    segments: int = Field(4, ge=1)
    d: int = Field(32, ge=1)
    layers: int = Field(2, ge=1)
    heads: int = Field(1, ge=1)
    variant: Variant = "full"
    checkpoint: Optional[str] = None
    seed: int = 0


class SuiteResult(BaseModel):
    name: SuiteName
    passed: bool
    cases: int
    failures: List[str] = Field(default_factory=list)
    max_error: Optional[float] = None
    seconds: float


class CheckReport(BaseModel):
    passed: bool
    seed: int
    precision: Literal["f32", "f64"]
    suites: List[SuiteResult]

    def failing(self) -> List[str]:
        return [s.name for s in self.suites if not s.passed]
