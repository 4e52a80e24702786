# ponet/models/domain.py: Domain models
from __future__ import annotations

import math
from typing import Dict, Iterator, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


Variant = Literal["full", "no_ss_ga", "no_ga", "no_smp", "no_lmp", "ga_only"]
VARIANTS: Tuple[str, ...] = ("full", "no_ss_ga", "no_ga", "no_smp", "no_lmp", "ga_only")
Path = Literal["naive", "fused"]
Head = Literal["cls_token", "max_pool"]
MixerName = Literal["ponet_naive", "ponet_fused", "self_attention"]
TaskKind = Literal["segment_max_id", "duplicate_detect", "parity"]
Branch = Literal["GA", "SMP", "LMP", "mean"]

_ARRAYS = ConfigDict(frozen=True, arbitrary_types_allowed=True)


# Segmentation

class SegmentMap(BaseModel):
    """
    Contiguous partition of a sequence of N tokens into K non-empty segments.
    """
    model_config = ConfigDict(frozen=True)

    ids: Tuple[int, ...]
    k: int
    boundaries: Tuple[int, ...]

    @model_validator(mode="after")
    def _check_partition(self) -> "SegmentMap":
        if not self.ids:
            raise ValueError("segment map must cover at least one token")
        if len(self.boundaries) != self.k or self.boundaries[0] != 0:
            raise ValueError("boundaries must start at 0 and list one offset per segment")
        if any(b >= a for a, b in zip(self.boundaries[1:], self.boundaries)):
            raise ValueError("boundaries must be strictly increasing")
        expected = 0
        for n, sid in enumerate(self.ids):
            if sid == expected + 1 and sid < self.k and self.boundaries[sid] == n:
                expected = sid
            elif sid != expected:
                raise ValueError(f"ids must be contiguous and non-decreasing (token {n})")
        if expected != self.k - 1:
            raise ValueError("ids must be onto [0, K)")
        return self

    @classmethod
    def from_ids(cls, ids: List[int]) -> "SegmentMap":
        boundaries = [n for n, sid in enumerate(ids) if n == 0 or sid != ids[n - 1]]
        return cls(ids=tuple(ids), k=len(boundaries), boundaries=tuple(boundaries))

    @property
    def n_tokens(self) -> int:
        return len(self.ids)

    @property
    def lengths(self) -> Tuple[int, ...]:
        ends = self.boundaries[1:] + (self.n_tokens,)
        return tuple(e - s for s, e in zip(self.boundaries, ends))

    @property
    def ids_array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.intp)

    def segment_of(self, n: int) -> int:
        return self.ids[n]


# Mixer block

class MixerConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    d: int = Field(..., ge=1)
    heads: int = Field(1, ge=1)
    lmp_window: int = 3
    lmp_stride: int = Field(1, ge=1)
    share_kv: bool = True
    variant: Variant = "full"
    tmp_enabled: bool = False
    layer_index: int = Field(1, ge=1, description="1-based, sets the TMP dilation")

    @model_validator(mode="after")
    def _check(self) -> "MixerConfig":
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.lmp_window < 1 or self.lmp_window % 2 == 0:
            raise ValueError(f"lmp_window must be odd and >= 1, got {self.lmp_window}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def attention_scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)

    @property
    def uses_ga(self) -> bool:
        return self.variant != "no_ga"

    @property
    def uses_ss_ga(self) -> bool:
        return self.variant not in ("no_ga", "no_ss_ga")

    @property
    def uses_smp(self) -> bool:
        return self.variant not in ("no_smp", "ga_only")

    @property
    def uses_lmp(self) -> bool:
        return self.variant not in ("no_lmp", "ga_only")


PROJECTION_NAMES: Tuple[str, ...] = ("qg", "kg", "vg", "s", "l", "o")


class ProjectionSet(BaseModel):
    """
    The six d x d projections of the block. Under share_kv the value
    projection is the key projection: same array objects.
    """
    model_config = _ARRAYS

    w_qg: np.ndarray
    b_qg: np.ndarray
    w_kg: np.ndarray
    b_kg: np.ndarray
    w_vg: np.ndarray
    b_vg: np.ndarray
    w_s: np.ndarray
    b_s: np.ndarray
    w_l: np.ndarray
    b_l: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    share_kv: bool = False

    @model_validator(mode="after")
    def _check(self) -> "ProjectionSet":
        d = self.w_qg.shape[0]
        for name in PROJECTION_NAMES:
            w = getattr(self, f"w_{name}")
            b = getattr(self, f"b_{name}")
            if w.shape != (d, d) or b.shape != (d,):
                raise ValueError(f"projection {name}: expected ({d},{d}) and ({d},)")
        if self.share_kv and (self.w_vg is not self.w_kg or self.b_vg is not self.b_kg):
            raise ValueError("share_kv requires w_vg/b_vg to alias w_kg/b_kg")
        return self

    @property
    def d(self) -> int:
        return self.w_qg.shape[0]

    def named(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for name in PROJECTION_NAMES:
            if self.share_kv and name == "vg":
                continue
            out[f"w_{name}"] = getattr(self, f"w_{name}")
            out[f"b_{name}"] = getattr(self, f"b_{name}")
        return out


class Projections(BaseModel):
    model_config = _ARRAYS

    qg: np.ndarray
    kg: np.ndarray
    vg: np.ndarray
    s: np.ndarray
    l: np.ndarray
    o: np.ndarray


class BlockTape(BaseModel):
    """
    Forward intermediates needed by the analytic backward pass.
    """
    model_config = _ARRAYS

    path: Path
    cfg: MixerConfig
    seg: SegmentMap
    params: ProjectionSet
    h: np.ndarray
    proj: Projections
    h_mean: np.ndarray
    g: np.ndarray
    g_prime: Optional[np.ndarray] = None
    attn: Optional[np.ndarray] = None
    smp_values: np.ndarray
    smp_idx: np.ndarray
    lmp_values: np.ndarray
    lmp_idx: np.ndarray
    tmp_values: Optional[np.ndarray] = None
    tmp_idx: Optional[np.ndarray] = None
    out: np.ndarray

    @property
    def global_term(self) -> Optional[np.ndarray]:
        if not self.cfg.uses_ga:
            return None
        return self.g_prime if self.cfg.uses_ss_ga else self.g


class MixerOutput(BaseModel):
    model_config = _ARRAYS

    p: np.ndarray
    diagnostics: Optional[Dict[str, np.ndarray]] = None
    tape: Optional[BlockTape] = None


# Encoder

class EncoderConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    vocab_size: int = Field(..., ge=1)
    max_len: int = Field(..., ge=1)
    d: int = Field(..., ge=1)
    layers: int = Field(1, ge=1)
    ffn_hidden: Optional[int] = None
    dropout_rate: float = Field(0.1, ge=0.0, lt=1.0)
    mixer: MixerConfig
    head: Head = "max_pool"
    num_classes: int = Field(2, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "EncoderConfig":
        if self.mixer.d != self.d:
            raise ValueError(f"mixer.d={self.mixer.d} differs from d={self.d}")
        return self

    @property
    def ffn_dim(self) -> int:
        return self.ffn_hidden if self.ffn_hidden is not None else 4 * self.d

    def mixer_for_layer(self, layer: int) -> MixerConfig:
        return self.mixer.model_copy(update={"layer_index": layer + 1})


class LayerParams(BaseModel):
    model_config = _ARRAYS

    mix: ProjectionSet
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


LAYER_TENSORS: Tuple[str, ...] = ("ln1_g", "ln1_b", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln2_g", "ln2_b")


class EncoderParams(BaseModel):
    model_config = _ARRAYS

    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: List[LayerParams]
    head_w: np.ndarray
    head_b: np.ndarray

    def named(self) -> Iterator[Tuple[str, np.ndarray]]:
        """
        Unique trainable arrays with stable dotted names.
        """
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for i, layer in enumerate(self.layers):
            for name, arr in layer.mix.named().items():
                yield f"layers.{i}.mix.{name}", arr
            for name in LAYER_TENSORS:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "head_w", self.head_w
        yield "head_b", self.head_b


class LayerDiagnostics(BaseModel):
    model_config = _ARRAYS

    layer: int
    branches: Dict[str, np.ndarray]


# Gradient checking

class ParamGradStats(BaseModel):
    name: str
    max_rel_err: float
    mean_rel_err: float
    failing: List[Tuple[int, ...]] = Field(default_factory=list)
    flagged_ties: List[Tuple[int, ...]] = Field(default_factory=list)
    roundoff: List[Tuple[int, ...]] = Field(default_factory=list)


class GradReport(BaseModel):
    tol: float
    params: List[ParamGradStats]

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return all(not p.failing for p in self.params)


# Causal streaming

class CausalState(BaseModel):
    model_config = _ARRAYS

    t: int = 0
    running_mean: np.ndarray
    seg_running_max: np.ndarray
    current_segment: int = 0
    lmp_buffer: Tuple[np.ndarray, ...] = ()
    window: int = 3


class LeakageReport(BaseModel):
    t_perturb: int
    t_check: int
    max_abs_diff: float
    violations: List[int] = Field(default_factory=list)

    @property
    def leaked(self) -> bool:
        return bool(self.violations)


# Benchmarks

class BenchSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lengths: List[int] = Field(default_factory=lambda: [512, 1024, 2048, 4096, 8192, 16384])
    d: int = 64
    heads: int = 2
    layers: int = 2
    batch: int = 32
    segments: int = 8
    warmup_iters: int = Field(1, ge=0)
    measured_iters: int = Field(3, ge=3)
    mixers: List[MixerName] = Field(default_factory=lambda: ["ponet_naive", "ponet_fused", "self_attention"])
    precision: Literal["f32", "f64"] = "f32"
    parallel: bool = False
    seed: int = 0

    @field_validator("lengths")
    @classmethod
    def _sorted(cls, v: List[int]) -> List[int]:
        if not v or any(b <= a for a, b in zip(v, v[1:])) or v[0] < 1:
            raise ValueError("lengths must be positive and strictly ascending")
        return v

    @model_validator(mode="after")
    def _check(self) -> "BenchSpec":
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        return self


class AttentionParams(BaseModel):
    """
    Reference multi-head self-attention weights (Q, K, V and output maps).
    """

    model_config = _ARRAYS

    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray


class BenchRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    mixer: MixerName
    length: int
    d: int
    heads: int
    batch: int
    median_seconds: float = Field(..., gt=0)
    est_bytes: int
    mult_count: int


class RefusedCell(BaseModel):
    mixer: MixerName
    length: int
    est_bytes: int
    budget_bytes: int


class BenchReport(BaseModel):
    rows: List[BenchRow]
    parallel_rows: List[BenchRow] = Field(default_factory=list)
    refused: List[RefusedCell] = Field(default_factory=list)


class ScalingFit(BaseModel):
    mixer: MixerName
    exponent: float
    ratios: List[Tuple[int, int, float]]


# Tasks and training

class TaskSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: TaskKind
    length: int = Field(64, ge=2)
    vocab: int = Field(128, ge=2)
    segments: int = Field(4, ge=1)
    seed: int = 0
    size: int = Field(2000, ge=1)

    @property
    def num_classes(self) -> int:
        return self.segments if self.kind == "segment_max_id" else 2


class Example(BaseModel):
    model_config = ConfigDict(frozen=True)

    tokens: Tuple[int, ...]
    seg: SegmentMap
    label: int


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(1e-3, ge=0.0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    batch: int = Field(32, ge=1)
    steps: int = Field(500, ge=1)
    eval_every: int = Field(50, ge=1)
    eval_size: int = Field(500, ge=1)
    seed: int = 0


class CurvePoint(BaseModel):
    step: int
    loss: float
    eval_acc: Optional[float] = None


class TrainResult(BaseModel):
    curve: List[CurvePoint]
    final_accuracy: float


# Encoder forward records

class LayerTape(BaseModel):
    model_config = _ARRAYS

    mix: BlockTape
    mix_mask: Optional[np.ndarray] = None
    ln1_hat: np.ndarray
    ln1_inv: np.ndarray
    h1: np.ndarray
    ffn_pre: np.ndarray
    ffn_act: np.ndarray
    ffn_mask: Optional[np.ndarray] = None
    ln2_hat: np.ndarray
    ln2_inv: np.ndarray


class EncoderTape(BaseModel):
    model_config = _ARRAYS

    tokens: Tuple[int, ...]
    layers: List[LayerTape]
    encoded: np.ndarray


class EncoderResult(BaseModel):
    model_config = _ARRAYS

    h: np.ndarray
    diagnostics: Optional[List[LayerDiagnostics]] = None
    tape: Optional[EncoderTape] = None


class NormRow(BaseModel):
    layer: int
    branch: Branch
    norm: float
