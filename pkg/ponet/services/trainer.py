# ponet/services/trainer.py: Adam training loop for the encoder classifier
from __future__ import annotations

import logging
import math
from pathlib import Path as FsPath
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from ..errors import ConfigError, DivergenceError, NumericError
from ..models.domain import (
    CurvePoint,
    EncoderConfig,
    EncoderParams,
    Example,
    Path,
    TaskSpec,
    TrainConfig,
    TrainResult,
)
from ..storage.in_memory import get_or_create_dataset
from .encoder import classify, encode
from .grad_check import Grads, loss_and_grads
from .tasks import eval_spec
from .tensor_core import make_rng

logger = logging.getLogger(__name__)


class Adam:
    """
    Adam with bias correction, updating parameter arrays in place.
    """

    def __init__(self, params: EncoderParams, cfg: TrainConfig) -> None:
        self.cfg = cfg
        self.params = dict(params.named())
        self.m = {name: np.zeros_like(arr) for name, arr in self.params.items()}
        self.v = {name: np.zeros_like(arr) for name, arr in self.params.items()}
        self.t = 0

    def step(self, grads: Grads) -> None:
        self.t += 1
        c = self.cfg
        correction1 = 1.0 - c.beta1**self.t
        correction2 = 1.0 - c.beta2**self.t
        for name, arr in self.params.items():
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            arr -= c.lr * m_hat / (np.sqrt(v_hat) + c.eps)


def global_norm(grads: Grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grads(grads: Grads, max_norm: float) -> float:
    """
    Scale all gradients so their joint L2 norm is at most max_norm.
    Returns the norm before clipping.
    """
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def evaluate(params: EncoderParams, enc_cfg: EncoderConfig, data: Sequence[Example], path: Path = "fused") -> float:
    correct = 0
    for ex in data:
        encoded = encode(ex.tokens, ex.seg, params, enc_cfg, path=path).h
        correct += int(np.argmax(classify(encoded, enc_cfg.head, params)) == ex.label)
    return correct / len(data)


def _batch_loss_and_grads(
    batch: Sequence[Example],
    params: EncoderParams,
    enc_cfg: EncoderConfig,
    rng: np.random.Generator,
    path: Path,
) -> tuple[float, Grads]:
    total = 0.0
    acc: Dict[str, np.ndarray] = {}
    for ex in batch:
        out = loss_and_grads(ex.tokens, ex.seg, ex.label, params, enc_cfg, train=True, rng=rng, path=path)
        total += out.loss
        for name, g in out.grads.items():
            if name in acc:
                acc[name] += g
            else:
                acc[name] = g.copy()
    n = len(batch)
    return total / n, {name: g / n for name, g in acc.items()}


def train(
    params: EncoderParams,
    enc_cfg: EncoderConfig,
    task: TaskSpec,
    cfg: TrainConfig,
    path: Path = "fused",
) -> TrainResult:
    """
    Minibatch Adam on cross-entropy. Parameters are updated in place; the
    loss recorded at step s is that of batch s before its update.
    """
    if enc_cfg.num_classes != task.num_classes:
        raise ConfigError(f"encoder has {enc_cfg.num_classes} classes, task {task.kind} needs {task.num_classes}")
    if task.length > enc_cfg.max_len or task.vocab > enc_cfg.vocab_size:
        raise ConfigError("task length/vocab exceed the encoder's max_len/vocab_size")

    train_data = get_or_create_dataset(task)
    eval_data = get_or_create_dataset(eval_spec(task, cfg.eval_size))
    rng = make_rng(cfg.seed)
    opt = Adam(params, cfg)
    curve: List[CurvePoint] = []
    eval_acc: Optional[float] = None

    for step in range(cfg.steps):
        batch = [train_data[i] for i in rng.integers(len(train_data), size=cfg.batch)]
        try:
            loss, grads = _batch_loss_and_grads(batch, params, enc_cfg, rng, path)
        except NumericError as e:
            raise DivergenceError(step, float("nan")) from e
        if not math.isfinite(loss):
            raise DivergenceError(step, loss)
        norm = clip_grads(grads, cfg.clip_norm)
        opt.step(grads)

        point = CurvePoint(step=step, loss=loss)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            eval_acc = evaluate(params, enc_cfg, eval_data, path)
            point = point.model_copy(update={"eval_acc": eval_acc})
            logger.info("step %d: loss=%.4f eval_acc=%.4f", step, loss, eval_acc)
        else:
            logger.debug("step %d: loss=%.4f grad_norm=%.4f", step, loss, norm)
        curve.append(point)

    return TrainResult(curve=curve, final_accuracy=float(eval_acc))


def write_curve_csv(curve: Sequence[CurvePoint], path: FsPath) -> FsPath:
    path = FsPath(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([p.model_dump() for p in curve], columns=["step", "loss", "eval_acc"])
    frame.to_csv(path, index=False)
    return path
