import time

import numpy as np
import pytest

from ponet.errors import ConfigError, InputError, NumericError
from ponet.models.api import CheckConfig
from ponet.models.domain import EncoderConfig, MixerConfig, ProjectionSet
from ponet.services.causal_stream import (
    EncoderStream,
    boundary_flags,
    causal_forward_batch,
    leakage_probe,
    project_token,
    run_stream,
    stream_init,
    stream_step,
)
from ponet.services.encoder import encode, init_encoder
from ponet.services.mix_block import init_projections, mix_fused
from ponet.services.segmentation import segment_even, segment_whole
from ponet.services.suites import run_check
from ponet.services.tensor_core import make_rng

CFG = MixerConfig(d=6, variant="no_ss_ga")


@pytest.fixture
def params(rng):
    return init_projections(6, rng)


def test_init_rejects_variants_needing_second_stage(params):
    with pytest.raises(ConfigError, match="no_ss_ga"):
        stream_init(params, MixerConfig(d=6))
    with pytest.raises(ConfigError):
        stream_init(params, MixerConfig(d=6, variant="no_ss_ga", tmp_enabled=True))


def test_init_state(params):
    state = stream_init(params, CFG)
    assert state.t == 0
    assert state.lmp_buffer == ()
    assert np.all(state.seg_running_max == -np.inf)
    assert not np.any(state.running_mean)
    again = stream_init(params, CFG)
    assert np.array_equal(state.running_mean, again.running_mean)


def test_first_step_equals_batch_on_one_token(params, rng):
    row = rng.normal(size=6)
    p, state = stream_step(stream_init(params, CFG), row, False, params, CFG)
    batch = mix_fused(row[None, :], params, segment_whole(1), CFG).p[0]
    np.testing.assert_allclose(p, batch, atol=1e-12)
    assert state.t == 1


def test_mean_and_max_recursions(rng):
    d = 1
    eye = {}
    for name in ("qg", "kg", "vg", "s", "l", "o"):
        eye[f"w_{name}"] = np.eye(d)
        eye[f"b_{name}"] = np.zeros(d)
    ident = ProjectionSet(share_kv=False, **eye)
    cfg = MixerConfig(d=1, variant="no_ss_ga", share_kv=False)
    state = stream_init(ident, cfg)
    for v in (5.0, 1.0, 0.0):
        _, state = stream_step(state, np.array([v]), False, ident, cfg)
    assert state.running_mean[0] == pytest.approx(2.0)
    _, state = stream_step(state, np.array([4.0]), False, ident, cfg)
    assert state.running_mean[0] == pytest.approx(2.5)
    _, state = stream_step(state, np.array([3.0]), False, ident, cfg)
    assert state.seg_running_max[0] == 5.0
    _, state = stream_step(state, np.array([2.0]), True, ident, cfg)
    assert state.seg_running_max[0] == 2.0
    assert state.current_segment == 1
    assert len(state.lmp_buffer) == 2


def test_stream_matches_prefix_recomputation(params, rng):
    rows = rng.normal(size=(24, 6))
    flags = [t in (7, 15) for t in range(24)]
    streamed = run_stream(rows, flags, params, CFG)
    oracle = causal_forward_batch(rows, flags, params, CFG)
    np.testing.assert_allclose(streamed, oracle, rtol=0, atol=1e-12)

    state = stream_init(params, CFG)
    for t, row in enumerate(rows):
        _, state = stream_step(state, row, flags[t], params, CFG)
        prefix_mean = (rows[: t + 1] @ params.w_qg + params.b_qg).mean(axis=0)
        np.testing.assert_allclose(state.running_mean, prefix_mean, atol=1e-12)
        assert len(state.lmp_buffer) <= CFG.lmp_window - 1


def test_segment_max_is_exact(params, rng):
    rows = rng.normal(size=(12, 6))
    seg = segment_even(12, 3)
    flags = boundary_flags(seg)
    assert flags == [False] * 4 + [True] + [False] * 3 + [True] + [False] * 3
    state = stream_init(params, CFG)
    for t, row in enumerate(rows):
        _, state = stream_step(state, row, flags[t], params, CFG)
        start = seg.boundaries[seg.segment_of(t)]
        exact = np.max([project_token(r, params)["s"] for r in rows[start: t + 1]], axis=0)
        assert np.array_equal(state.seg_running_max, exact)


def test_step_rejects_non_finite(params):
    with pytest.raises(NumericError):
        stream_step(stream_init(params, CFG), np.full(6, np.nan), False, params, CFG)


def test_leakage_probe_examples(params, rng):
    rows = rng.normal(size=(10, 6))
    report = leakage_probe(rows, 10, 9, params, CFG, rng)
    assert not report.leaked
    assert report.max_abs_diff == 0.0
    report = leakage_probe(rows, 5, 4, params, CFG, rng)
    assert not report.leaked
    with pytest.raises(InputError):
        leakage_probe(rows, 4, 4, params, CFG, rng)
    with pytest.raises(InputError):
        leakage_probe(rows, 11, 3, params, CFG, rng)


def test_random_leakage_probes(params):
    rng = make_rng(99)
    for _ in range(50):
        rows = rng.normal(size=(32, 6))
        t_perturb = int(rng.integers(2, 33))
        t_check = int(rng.integers(1, t_perturb))
        assert not leakage_probe(rows, t_perturb, t_check, params, CFG, rng).leaked


def test_encoder_stream_is_causal_and_deterministic(rng):
    cfg = EncoderConfig(
        vocab_size=20, max_len=16, d=6, layers=2, dropout_rate=0.0, mixer=MixerConfig(d=6, variant="no_ss_ga")
    )
    params = init_encoder(cfg, rng)
    tokens = [3, 1, 4, 1, 5, 9, 2, 6]
    a = np.stack([EncoderStream(params, cfg).step(t) for t in tokens[:1]])
    stream = EncoderStream(params, cfg)
    first = np.stack([stream.step(t) for t in tokens])
    other = EncoderStream(params, cfg)
    second = np.stack([other.step(t) for t in tokens[:5] + [0, 0, 0]])
    np.testing.assert_array_equal(first[:5], second[:5])
    np.testing.assert_array_equal(a[0], first[0])
    # a single token has no future, so it matches the batch encoder
    batch = encode(tokens[:1], segment_whole(1), params, cfg).h
    np.testing.assert_allclose(first[0], batch[0], atol=1e-10)


def test_encoder_stream_validates_tokens(rng):
    cfg = EncoderConfig(vocab_size=4, max_len=2, d=4, dropout_rate=0.0, mixer=MixerConfig(d=4, variant="no_ss_ga"))
    stream = EncoderStream(init_encoder(cfg, rng), cfg)
    with pytest.raises(InputError):
        stream.step(4)
    stream.step(0)
    stream.step(1)
    with pytest.raises(InputError):
        stream.step(2)


@pytest.mark.slow
def test_step_time_is_constant_in_t(params, rng):
    rows = rng.normal(size=(1000, 6))
    state = stream_init(params, CFG)
    times = []
    for row in rows:
        start = time.perf_counter()
        _, state = stream_step(state, row, False, params, CFG)
        times.append(time.perf_counter() - start)
    early = np.mean(times[10:100])
    late = np.mean(times[900:1000])
    assert late <= 1.5 * early


def test_replay_is_bitwise_identical(params, rng):
    rows = rng.normal(size=(40, 6))
    flags = boundary_flags(segment_even(40, 5))
    first = run_stream(rows, flags, params, CFG)
    second = run_stream(rows.copy(), flags, params, CFG)
    assert first.tobytes() == second.tobytes()


@pytest.mark.slow
def test_default_causal_suite_passes():
    report = run_check(CheckConfig(suites=["causal"]))
    (suite,) = report.suites
    assert suite.passed, suite.failures
    assert suite.cases >= 20
