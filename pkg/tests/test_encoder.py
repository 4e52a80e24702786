import numpy as np
import pytest
from pydantic import ValidationError

from ponet.errors import ConfigError, InputError, StateError
from ponet.models.domain import EncoderConfig, EncoderParams, LayerDiagnostics, MixerConfig
from ponet.services.encoder import (
    branch_norm,
    classify,
    embed,
    encode,
    init_encoder,
    pool_for_head,
    pooling_norms,
)
from ponet.services.mix_block import mix_fused
from ponet.services.segmentation import segment_even
from ponet.services.tensor_core import affine, gelu, layer_norm, make_rng


TOKENS = [1, 5, 3, 3, 9, 0, 2, 7]


def test_encode_eval_mode_is_deterministic(small_encoder):
    params, cfg = small_encoder
    seg = segment_even(len(TOKENS), 2)
    a = encode(TOKENS, seg, params, cfg).h
    b = encode(TOKENS, seg, params, cfg).h
    assert np.array_equal(a, b)


def test_single_layer_matches_manual_composition(rng):
    cfg = EncoderConfig(vocab_size=16, max_len=8, d=8, layers=1, dropout_rate=0.3, mixer=MixerConfig(d=8, heads=2))
    params = init_encoder(cfg, rng)
    seg = segment_even(len(TOKENS), 3)
    layer = params.layers[0]

    h = params.tok_emb[TOKENS] + params.pos_emb[: len(TOKENS)]
    h1, _, _ = layer_norm(h + mix_fused(h, layer.mix, seg, cfg.mixer_for_layer(0)).p, layer.ln1_g, layer.ln1_b)
    f = affine(gelu(affine(h1, layer.ffn_w1, layer.ffn_b1)), layer.ffn_w2, layer.ffn_b2)
    expected, _, _ = layer_norm(h1 + f, layer.ln2_g, layer.ln2_b)

    np.testing.assert_allclose(encode(TOKENS, seg, params, cfg).h, expected, atol=1e-12)


def test_zero_embeddings_stay_finite(small_encoder):
    params, cfg = small_encoder
    params.tok_emb[:] = 0.0
    params.pos_emb[:] = 0.0
    out = encode(TOKENS, segment_even(len(TOKENS), 2), params, cfg).h
    assert np.all(np.isfinite(out))


def test_dropout_needs_rng_and_uses_it(rng):
    cfg = EncoderConfig(vocab_size=16, max_len=8, d=8, dropout_rate=0.5, mixer=MixerConfig(d=8))
    params = init_encoder(cfg, rng)
    seg = segment_even(len(TOKENS), 2)
    with pytest.raises(ConfigError):
        encode(TOKENS, seg, params, cfg, train=True)
    a = encode(TOKENS, seg, params, cfg, train=True, rng=make_rng(3)).h
    b = encode(TOKENS, seg, params, cfg, train=True, rng=make_rng(3)).h
    c = encode(TOKENS, seg, params, cfg).h
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


def test_embed_validates_inputs(small_encoder):
    params, cfg = small_encoder
    with pytest.raises(InputError):
        embed([16], params, cfg)
    with pytest.raises(InputError):
        embed(list(range(13)), params, cfg)
    with pytest.raises(InputError):
        embed([], params, cfg)


def test_encoder_config_is_strict():
    with pytest.raises(ValidationError):
        EncoderConfig(vocab_size=4, max_len=4, d=8, mixer=MixerConfig(d=4))
    with pytest.raises(ValidationError):
        EncoderConfig(vocab_size=4, max_len=4, d=4, mixer=MixerConfig(d=4), extra_field=1)


def test_named_parameters_are_unique(small_encoder):
    params, cfg = small_encoder
    names = [name for name, _ in params.named()]
    assert len(names) == len(set(names))
    assert "layers.0.mix.w_qg" in names
    assert "layers.1.mix.w_vg" not in names
    assert names[0] == "tok_emb" and names[-1] == "head_b"


def test_cls_head_with_identity_weights(rng):
    d = 4
    params = EncoderParams(
        tok_emb=np.zeros((2, d)),
        pos_emb=np.zeros((3, d)),
        layers=[],
        head_w=np.eye(d),
        head_b=np.zeros(d),
    )
    encoded = rng.normal(size=(3, d))
    np.testing.assert_array_equal(classify(encoded, "cls_token", params), encoded[0])


def test_max_pool_on_constant_rows_matches_cls(rng):
    d = 4
    params = EncoderParams(
        tok_emb=np.zeros((2, d)),
        pos_emb=np.zeros((3, d)),
        layers=[],
        head_w=rng.normal(size=(d, 3)),
        head_b=rng.normal(size=3),
    )
    encoded = np.tile(rng.normal(size=d), (5, 1))
    np.testing.assert_array_equal(classify(encoded, "max_pool", params), classify(encoded, "cls_token", params))

    encoded = rng.normal(size=(6, d))
    expected = encoded.max(axis=0) @ params.head_w + params.head_b
    np.testing.assert_allclose(classify(encoded, "max_pool", params), expected, atol=1e-12)
    pooled, idx = pool_for_head(encoded, "max_pool")
    np.testing.assert_array_equal(idx, encoded.argmax(axis=0))


def test_branch_norm_examples(rng):
    assert branch_norm(np.zeros((3, 4))) == 0.0
    assert branch_norm(np.ones((3, 4))) == pytest.approx(1.0)
    x = rng.normal(size=(4, 8))
    expected = np.mean([np.sqrt(np.mean(row**2)) for row in x])
    assert branch_norm(x) == pytest.approx(expected, abs=1e-12)


def test_pooling_norms_shape_and_oracle(small_encoder):
    params, cfg = small_encoder
    seg = segment_even(len(TOKENS), 2)
    runs = [encode(TOKENS, seg, params, cfg, diagnostics=True).diagnostics]
    rows = pooling_norms(runs)
    assert len(rows) == cfg.layers * 4
    assert [r.branch for r in rows[:4]] == ["GA", "SMP", "LMP", "mean"]
    first = runs[0][0].branches
    assert rows[0].norm == pytest.approx(branch_norm(first["G"]), abs=1e-12)
    assert rows[1].norm == pytest.approx(branch_norm(first["S_prime"]), abs=1e-12)
    assert rows[2].norm == pytest.approx(branch_norm(first["L"]), abs=1e-12)
    assert rows[3].norm == pytest.approx(np.mean([rows[0].norm, rows[1].norm, rows[2].norm]), abs=1e-12)


def test_pooling_norms_needs_diagnostics():
    with pytest.raises(StateError):
        pooling_norms([])
    with pytest.raises(StateError):
        pooling_norms([[LayerDiagnostics(layer=1, branches={})]])


def test_zero_sublayers_reduce_to_layer_norms_of_embeddings(rng):
    cfg = EncoderConfig(vocab_size=16, max_len=8, d=8, layers=1, dropout_rate=0.0, mixer=MixerConfig(d=8, heads=2))
    params = init_encoder(cfg, rng)
    layer = params.layers[0]
    for arr in (layer.mix.w_o, layer.mix.b_o, layer.mix.w_l, layer.mix.b_l, layer.ffn_w2, layer.ffn_b2):
        arr[:] = 0.0
    layer.ln1_g[:] = rng.normal(size=8)
    layer.ln2_b[:] = rng.normal(size=8)
    seg = segment_even(len(TOKENS), 2)

    h = params.tok_emb[TOKENS] + params.pos_emb[: len(TOKENS)]
    h1, _, _ = layer_norm(h, layer.ln1_g, layer.ln1_b)
    expected, _, _ = layer_norm(h1, layer.ln2_g, layer.ln2_b)
    np.testing.assert_allclose(encode(TOKENS, seg, params, cfg).h, expected, atol=1e-12)
