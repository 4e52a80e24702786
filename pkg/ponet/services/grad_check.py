# ponet/services/grad_check.py: analytic backward passes and finite-difference checks
from __future__ import annotations

import logging
from typing import Callable, Dict, Hashable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, NumericError, StateError
from ..models.domain import (
    BlockTape,
    EncoderConfig,
    EncoderParams,
    EncoderTape,
    GradReport,
    ParamGradStats,
    Path,
    SegmentMap,
)
from .encoder import encode, pool_for_head
from .tensor_core import affine, gelu_grad, layer_norm_backward, log_softmax, softmax

logger = logging.getLogger(__name__)

Grads = Dict[str, np.ndarray]
Objective = Callable[[], Union[float, Tuple[float, Hashable]]]

REL_FLOOR = 1e-8
TIE_EPS = 1e-12
# multiples of machine epsilon in f, per unit of h, below which a difference is round-off
ROUNDOFF_C = 100.0


def _scatter_rows(n: int, idx: np.ndarray, values: np.ndarray) -> np.ndarray:
    # route values[r, j] to row idx[r, j] of column j
    out = np.zeros((n, values.shape[1]), dtype=values.dtype)
    cols = np.broadcast_to(np.arange(values.shape[1])[None, :], idx.shape)
    np.add.at(out, (idx, cols), values)
    return out


def backward_block(tape: BlockTape, d_out: np.ndarray) -> Tuple[np.ndarray, Grads]:
    """
    Gradients of the block output w.r.t. its input H and every projection
    parameter. Max pools route to their recorded winners; the mean spreads
    1/N; the shared key/value matrix receives both contributions.
    """
    if tape.h.dtype != np.float64 or d_out.dtype != np.float64:
        raise StateError("backward_block needs a 64-bit tape and upstream gradient")
    if d_out.shape != tape.out.shape:
        raise StateError(f"upstream gradient {d_out.shape} vs output {tape.out.shape}")
    cfg, params, proj, seg = tape.cfg, tape.params, tape.proj, tape.seg
    n, d = tape.h.shape
    ids = seg.ids_array
    global_term = tape.global_term

    d_proj = {name: np.zeros((n, d)) for name in ("kg", "vg", "s", "l")}

    coef = np.zeros((n, d))
    if global_term is not None:
        coef = coef + global_term
    if cfg.uses_smp:
        coef = coef + tape.smp_values[ids]
    d_o = d_out * coef
    weighted = d_out * proj.o

    if cfg.uses_smp:
        d_smp = np.zeros((seg.k, d))
        np.add.at(d_smp, ids, weighted)
        d_proj["s"] = _scatter_rows(n, tape.smp_idx, d_smp)
    if cfg.uses_lmp:
        d_proj["l"] = d_proj["l"] + _scatter_rows(n, tape.lmp_idx, d_out)
    if tape.tmp_idx is not None:
        d_proj["l"] = d_proj["l"] + _scatter_rows(n, tape.tmp_idx, d_out)

    d_g = np.zeros(d)
    if global_term is not None:
        d_global = np.sum(weighted, axis=0)
        if cfg.uses_ss_ga:
            heads, dh = cfg.heads, cfg.head_dim
            w = tape.attn
            k_heads = proj.kg.reshape(n, heads, dh).transpose(1, 0, 2)
            v_heads = proj.vg.reshape(n, heads, dh).transpose(1, 0, 2)
            g_heads = tape.g.reshape(heads, dh)
            dgp = d_global.reshape(heads, dh)
            d_v = w[:, :, None] * dgp[:, None, :]
            d_w = np.einsum("hnd,hd->hn", v_heads, dgp)
            d_scores = w * (d_w - np.sum(w * d_w, axis=1, keepdims=True)) / np.sqrt(dh)
            d_k = d_scores[:, :, None] * g_heads[:, None, :]
            d_g = np.einsum("hn,hnd->hd", d_scores, k_heads).reshape(d)
            d_proj["kg"] = d_k.transpose(1, 0, 2).reshape(n, d)
            d_proj["vg"] = d_v.transpose(1, 0, 2).reshape(n, d)
        else:
            d_g = d_global

    grads: Grads = {}
    h = tape.h
    if tape.path == "naive":
        d_qg = np.broadcast_to(d_g / n, (n, d))
        grads["w_qg"] = h.T @ d_qg
        grads["b_qg"] = np.sum(d_qg, axis=0)
        d_h = d_qg @ params.w_qg.T
    else:
        grads["w_qg"] = np.outer(tape.h_mean, d_g)
        grads["b_qg"] = d_g.copy()
        d_h = np.broadcast_to((params.w_qg @ d_g) / n, (n, d)).copy()

    d_proj["o"] = d_o
    for name, d_x in d_proj.items():
        w = getattr(params, f"w_{name}")
        d_h = d_h + d_x @ w.T
        grads[f"w_{name}"] = h.T @ d_x
        grads[f"b_{name}"] = np.sum(d_x, axis=0)
    if params.share_kv:
        grads["w_kg"] = grads["w_kg"] + grads.pop("w_vg")
        grads["b_kg"] = grads["b_kg"] + grads.pop("b_vg")
    return d_h, grads


def cross_entropy(logits: np.ndarray, label: int) -> Tuple[float, np.ndarray]:
    logp = log_softmax(logits)
    d_logits = softmax(logits)
    d_logits[label] -= 1.0
    return float(-logp[label]), d_logits


def backward_encoder(
    tape: EncoderTape,
    params: EncoderParams,
    cfg: EncoderConfig,
    d_encoded: np.ndarray,
) -> Grads:
    """
    Gradients of every encoder parameter given the gradient of the encoding.
    """
    grads: Grads = {}
    d_h = d_encoded
    for i in reversed(range(len(params.layers))):
        layer, lt = params.layers[i], tape.layers[i]
        prefix = f"layers.{i}."
        d_sum2, grads[prefix + "ln2_g"], grads[prefix + "ln2_b"] = layer_norm_backward(
            d_h, lt.ln2_hat, lt.ln2_inv, layer.ln2_g
        )
        d_f = d_sum2 if lt.ffn_mask is None else d_sum2 * lt.ffn_mask
        grads[prefix + "ffn_w2"] = lt.ffn_act.T @ d_f
        grads[prefix + "ffn_b2"] = np.sum(d_f, axis=0)
        d_pre = (d_f @ layer.ffn_w2.T) * gelu_grad(lt.ffn_pre)
        grads[prefix + "ffn_w1"] = lt.h1.T @ d_pre
        grads[prefix + "ffn_b1"] = np.sum(d_pre, axis=0)
        d_h1 = d_sum2 + d_pre @ layer.ffn_w1.T

        d_sum1, grads[prefix + "ln1_g"], grads[prefix + "ln1_b"] = layer_norm_backward(
            d_h1, lt.ln1_hat, lt.ln1_inv, layer.ln1_g
        )
        d_mix = d_sum1 if lt.mix_mask is None else d_sum1 * lt.mix_mask
        d_h_mix, mix_grads = backward_block(lt.mix, d_mix)
        for name, g in mix_grads.items():
            grads[f"{prefix}mix.{name}"] = g
        d_h = d_sum1 + d_h_mix

    ids = np.asarray(tape.tokens, dtype=np.intp)
    d_tok = np.zeros_like(params.tok_emb)
    np.add.at(d_tok, ids, d_h)
    d_pos = np.zeros_like(params.pos_emb)
    d_pos[: len(ids)] = d_h
    grads["tok_emb"] = d_tok
    grads["pos_emb"] = d_pos
    return grads


def _tied(candidates: np.ndarray, values: np.ndarray) -> np.ndarray:
    # candidates stacked on axis 0; True where a second candidate sits within TIE_EPS of the max
    return np.sum(candidates >= values[None] - TIE_EPS, axis=0) > 1


def _near_ties(tape: BlockTape) -> List[np.ndarray]:
    cfg, proj, seg = tape.cfg, tape.proj, tape.seg
    masks: List[np.ndarray] = []
    if cfg.uses_smp:
        close = (proj.s >= tape.smp_values[seg.ids_array] - TIE_EPS).astype(np.int64)
        counts = np.zeros(tape.smp_values.shape, dtype=np.int64)
        np.add.at(counts, seg.ids_array, close)
        masks.append(counts > 1)
    if cfg.uses_lmp:
        r = cfg.lmp_window // 2
        padded = np.pad(proj.l, ((r, r), (0, 0)), constant_values=-np.inf)
        windows = sliding_window_view(padded, cfg.lmp_window, axis=0)
        masks.append(_tied(np.moveaxis(windows, -1, 0), tape.lmp_values))
    if tape.tmp_idx is not None:
        n = proj.l.shape[0]
        delta = 2 ** (cfg.layer_index - 1)
        padded = np.pad(proj.l, ((delta, delta), (0, 0)), constant_values=-np.inf)
        candidates = np.stack([padded[o:o + n] for o in (0, delta, 2 * delta)])
        masks.append(_tied(candidates, tape.tmp_values))
    return masks


def argmax_signature(tape: EncoderTape, pool_idx: Optional[np.ndarray]) -> bytes:
    """
    Every max-pool winner index of a forward pass, plus a flag per pool
    output whose runner-up lies within TIE_EPS of the max. A change between
    two evaluations means a max-pool switched winners or a near-tie opened
    or closed.
    """
    parts: List[np.ndarray] = []
    for lt in tape.layers:
        parts.extend([lt.mix.smp_idx.ravel(), lt.mix.lmp_idx.ravel()])
        if lt.mix.tmp_idx is not None:
            parts.append(lt.mix.tmp_idx.ravel())
        parts.extend(mask.ravel() for mask in _near_ties(lt.mix))
    if pool_idx is not None:
        encoded = tape.encoded
        parts.append(pool_idx.ravel())
        parts.append(_tied(encoded, encoded[pool_idx, np.arange(encoded.shape[1])]).ravel())
    return np.concatenate(parts).astype(np.int64).tobytes() if parts else b""


class LossAndGrads(NamedTuple):
    loss: float
    logits: np.ndarray
    grads: Grads
    signature: bytes


def loss_and_grads(
    tokens: Sequence[int],
    seg: SegmentMap,
    label: int,
    params: EncoderParams,
    cfg: EncoderConfig,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    path: Path = "fused",
) -> LossAndGrads:
    """
    Cross-entropy of classify(encode(tokens)) and its analytic gradients.
    """
    result = encode(tokens, seg, params, cfg, train=train, rng=rng, path=path, keep_tape=True)
    encoded = result.h
    pooled, pool_idx = pool_for_head(encoded, cfg.head)
    logits = affine(pooled, params.head_w, params.head_b)
    loss, d_logits = cross_entropy(logits, label)

    grads: Grads = {"head_w": np.outer(pooled, d_logits), "head_b": d_logits.copy()}
    d_pooled = params.head_w @ d_logits
    d_encoded = np.zeros_like(encoded)
    if pool_idx is None:
        d_encoded[0] = d_pooled
    else:
        d_encoded[pool_idx, np.arange(encoded.shape[1])] = d_pooled
    grads.update(backward_encoder(result.tape, params, cfg, d_encoded))
    return LossAndGrads(loss, logits, grads, argmax_signature(result.tape, pool_idx))


def loss_and_signature(
    tokens: Sequence[int],
    seg: SegmentMap,
    label: int,
    params: EncoderParams,
    cfg: EncoderConfig,
    path: Path = "fused",
) -> Tuple[float, bytes]:
    result = encode(tokens, seg, params, cfg, path=path, keep_tape=True)
    pooled, pool_idx = pool_for_head(result.h, cfg.head)
    loss, _ = cross_entropy(affine(pooled, params.head_w, params.head_b), label)
    return loss, argmax_signature(result.tape, pool_idx)


def _evaluate(f: Objective) -> Tuple[float, Hashable]:
    out = f()
    value, signature = out if isinstance(out, tuple) else (out, None)
    value = float(value)
    if not np.isfinite(value):
        raise NumericError("fd_check: objective returned a non-finite value")
    return value, signature


def rel_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)


def fd_resolution(f_plus: float, f_minus: float, h: float) -> float:
    # absolute accuracy of a central difference limited by round-off in f
    return ROUNDOFF_C * float(np.finfo(np.float64).eps) * max(abs(f_plus), abs(f_minus)) / h


def fd_check(
    f: Objective,
    params: Dict[str, np.ndarray],
    analytic: Dict[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    names: Optional[Sequence[str]] = None,
) -> GradReport:
    """
    Central differences (f(p+h) - f(p-h)) / 2h per coordinate against the
    analytic gradient. f reads the arrays in `params`, which are perturbed
    in place and restored. A coordinate whose perturbation changes the
    objective's max-pool signature sits on a tie and is flagged instead of
    judged. A coordinate whose analytic and numeric values differ by less
    than fd_resolution passes and is reported as round-off.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ConfigError(f"step h={h} outside [1e-7, 1e-3]")
    _, base_sig = _evaluate(f)
    stats: List[ParamGradStats] = []
    for name in names if names is not None else list(params):
        arr = params[name]
        grad = analytic[name]
        errors: List[float] = []
        failing: List[Tuple[int, ...]] = []
        ties: List[Tuple[int, ...]] = []
        roundoff: List[Tuple[int, ...]] = []
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            f_plus, sig_plus = _evaluate(f)
            arr[idx] = orig - h
            f_minus, sig_minus = _evaluate(f)
            arr[idx] = orig
            coord = tuple(int(i) for i in idx)
            if sig_plus != base_sig or sig_minus != base_sig:
                ties.append(coord)
                continue
            fd = (f_plus - f_minus) / (2.0 * h)
            err = float(rel_error(np.float64(grad[idx]), np.float64(fd)))
            if err <= tol:
                errors.append(err)
            elif abs(float(grad[idx]) - fd) <= fd_resolution(f_plus, f_minus, h):
                roundoff.append(coord)
            else:
                errors.append(err)
                failing.append(coord)
        stats.append(
            ParamGradStats(
                name=name,
                max_rel_err=max(errors, default=0.0),
                mean_rel_err=float(np.mean(errors)) if errors else 0.0,
                failing=failing,
                flagged_ties=ties,
                roundoff=roundoff,
            )
        )
        if ties:
            logger.info("fd_check: %s has %d tie coordinates excluded", name, len(ties))
        if roundoff:
            logger.debug("fd_check: %s has %d coordinates below finite-difference resolution", name, len(roundoff))
    return GradReport(tol=tol, params=stats)


def check_encoder_gradients(
    tokens: Sequence[int],
    seg: SegmentMap,
    label: int,
    params: EncoderParams,
    cfg: EncoderConfig,
    h: float = 1e-5,
    tol: float = 1e-4,
    path: Path = "fused",
) -> GradReport:
    """
    fd_check of the eval-mode cross-entropy against loss_and_grads.
    """
    analytic = loss_and_grads(tokens, seg, label, params, cfg, path=path).grads
    named = dict(params.named())

    def objective() -> Tuple[float, bytes]:
        return loss_and_signature(tokens, seg, label, params, cfg, path=path)

    return fd_check(objective, named, analytic, h=h, tol=tol)
