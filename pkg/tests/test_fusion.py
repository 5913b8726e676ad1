import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from emorag.corpus import Sample
from emorag.errors import FormatError, PreconditionError, ShapeError
from emorag.fusion import (
    ModelConfig,
    ModelParams,
    ccc_loss,
    checkpoint_fingerprint,
    clamp_prediction,
    cross_attention,
    encode_sequence,
    encode_text,
    forward,
    forward_batch,
    init_params,
    load_checkpoint,
    model_grad_check,
    predict,
    save_checkpoint,
)
from emorag.numkit import DiffTensor, backward, grad_check, mul, tensor, tsum
from emorag.textproc import token_bucket, tokenize
from emorag.trainer import ccc_metric

# --- straight-line oracle ----------------------------------------------------


def oracle_text(text, p, cfg):
    toks = tokenize(text)
    acc = np.zeros(cfg.d_model)
    for tok in toks:
        acc += p["text.embedding"][token_bucket(tok, cfg.text_vocab_hash_dim, cfg.hash_seed)]
    acc /= len(toks)
    return acc @ p["text.proj.weight"] + p["text.proj.bias"]


def oracle_text_tokens(text, p, cfg):
    rows = [p["text.embedding"][token_bucket(t, cfg.text_vocab_hash_dim, cfg.hash_seed)] for t in tokenize(text)]
    return np.array([r @ p["text.proj.weight"] + p["text.proj.bias"] for r in rows])


def oracle_frames(frames, w, b, cfg):
    return np.array([np.tanh(f @ w + b) for f in frames[: cfg.max_frames]])


def oracle_attention(q, kv, p, block, cfg):
    dh = cfg.head_dim
    qp = q @ p[f"attn_{block}.w_q"]
    kp = kv @ p[f"attn_{block}.w_k"]
    vp = kv @ p[f"attn_{block}.w_v"]
    out = np.zeros(cfg.d_model)
    for h in range(cfg.n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = np.array([qp[sl] @ kp[t, sl] for t in range(len(kv))]) / np.sqrt(dh)
        w = np.exp(scores - scores.max())
        w /= w.sum()
        out[sl] = sum(w[t] * vp[t, sl] for t in range(len(kv)))
    return out @ p[f"attn_{block}.w_o"]


def oracle_forward(sample, prompt_text, p, cfg):
    h_t = oracle_text(sample.text, p, cfg)
    fa = oracle_frames(sample.audio_features, p["audio.weight"], p["audio.bias"], cfg)
    fv = oracle_frames(sample.video_features, p["video.weight"], p["video.bias"], cfg)
    seq = cfg.attention_mode == "sequence"
    h_a, h_v = fa.mean(axis=0), fv.mean(axis=0)
    a_att = oracle_attention(h_t, fa if seq else h_a[None], p, "audio", cfg)
    v_att = oracle_attention(h_t, fv if seq else h_v[None], p, "video", cfg)
    if prompt_text is None:
        p_att = np.zeros(cfg.d_model)
    else:
        fp = oracle_text_tokens(prompt_text, p, cfg)
        p_att = oracle_attention(h_t, fp if seq else oracle_text(prompt_text, p, cfg)[None], p, "prompt", cfg)
    h_final = np.concatenate([h_t, a_att, v_att, p_att])
    hidden = np.tanh(h_final @ p["predictor.w1"] + p["predictor.b1"])
    head = (hidden @ p["predictor.w2"] + p["predictor.b2"])[0]
    return h_final, cfg.output_offset + cfg.output_scale * head


def arrays(params):
    return {n: t.data for n, t in params.named()}


@pytest.mark.parametrize("mode", ["pooled", "sequence"])
@pytest.mark.parametrize("use_prompt", [True, False])
def test_forward_matches_oracle(fixture7, prompts7, mode, use_prompt):
    cfg = ModelConfig(d_model=16, n_heads=4, max_frames=40, attention_mode=mode, use_emotion_prompt=use_prompt)
    params = init_params(cfg, seed=5)
    lookup = {p.sample_id: p for p in prompts7}
    for s in fixture7.samples[:4]:
        prompt = lookup[s.id] if use_prompt else None
        trace = forward(s, prompt, params, cfg)
        h_final, raw = oracle_forward(s, prompt.text if prompt else None, arrays(params), cfg)
        assert np.allclose(trace.h_final, h_final, atol=1e-10, rtol=0)
        assert trace.raw_prediction == pytest.approx(raw, abs=1e-10)


def test_batch_forward_equals_single(fixture7, prompts7):
    cfg = ModelConfig()
    params = init_params(cfg, seed=1)
    batch = fixture7.samples[:6]
    lookup = {p.sample_id: p for p in prompts7}
    prompts = [lookup[s.id] for s in batch]
    raw = forward_batch(batch, prompts, params, cfg).raw_prediction.data
    single = [forward(s, p, params, cfg).raw_prediction for s, p in zip(batch, prompts)]
    assert np.allclose(raw, single, atol=1e-12)


# --- encoders ----------------------------------------------------------------


@pytest.fixture()
def cfg_params():
    cfg = ModelConfig(audio_dim=3, video_dim=2, d_model=8, n_heads=2, text_vocab_hash_dim=32, max_frames=6)
    return cfg, init_params(cfg, seed=2)


def test_text_bag_ignores_order(cfg_params):
    cfg, params = cfg_params
    a = encode_text("sad tired alone today", params, cfg).data
    b = encode_text("today alone tired sad", params, cfg).data
    assert np.array_equal(a, b)


def test_single_token_text(cfg_params):
    cfg, params = cfg_params
    row = params["text.embedding"].data[token_bucket("tired", 32, 0)]
    expected = row @ params["text.proj.weight"].data + params["text.proj.bias"].data
    assert np.allclose(encode_text("Tired!", params, cfg).data, expected, atol=1e-14)


def test_three_token_hand_average(cfg_params):
    cfg, params = cfg_params
    e = params["text.embedding"].data
    b = [token_bucket(t, 32, 0) for t in ("school", "grades", "worry")]
    avg = (e[b[0]] + e[b[1]] + e[b[2]]) / 3
    expected = avg @ params["text.proj.weight"].data + params["text.proj.bias"].data
    assert np.allclose(encode_text("school grades worry", params, cfg).data, expected, atol=1e-12)


def test_empty_text_rejected(cfg_params):
    cfg, params = cfg_params
    with pytest.raises(PreconditionError):
        encode_text("  ", params, cfg)


def test_sequence_single_frame(cfg_params):
    cfg, params = cfg_params
    frame = np.array([[0.3, -1.0, 2.0]])
    expected = np.tanh(frame[0] @ params["audio.weight"].data + params["audio.bias"].data)
    assert np.allclose(encode_sequence(frame, params, "audio", cfg).data, expected, atol=1e-15)
    repeated = np.repeat(frame, 4, axis=0)
    assert np.allclose(encode_sequence(repeated, params, "audio", cfg).data, expected, atol=1e-15)


def test_sequence_matches_oracle_and_truncates(cfg_params):
    cfg, params = cfg_params
    frames = np.random.default_rng(0).normal(size=(9, 3))
    w, b = params["audio.weight"].data, params["audio.bias"].data
    expected = oracle_frames(frames, w, b, cfg).mean(axis=0)
    assert np.allclose(encode_sequence(frames, params, "audio", cfg).data, expected, atol=1e-12)
    assert np.array_equal(encode_sequence(frames, params, "audio", cfg).data,
                          encode_sequence(frames[:6], params, "audio", cfg).data)


def test_sequence_width_mismatch(cfg_params):
    cfg, params = cfg_params
    with pytest.raises(ShapeError):
        encode_sequence(np.ones((4, 5)), params, "audio", cfg)


# --- attention ---------------------------------------------------------------


def test_single_position_ignores_query(cfg_params):
    cfg, params = cfg_params
    kv = np.random.default_rng(1).normal(size=8)
    expected = kv @ params["attn_audio.w_v"].data @ params["attn_audio.w_o"].data
    for q in (np.zeros(8), np.arange(8.0), -5 * np.ones(8)):
        assert np.allclose(cross_attention(q, kv, params, "audio", cfg).data, expected, atol=1e-13)


def test_identical_rows_give_value_projection(cfg_params):
    cfg, params = cfg_params
    v = np.random.default_rng(2).normal(size=8)
    out = cross_attention(np.arange(8.0), np.tile(v, (5, 1)), params, "video", cfg).data
    assert np.allclose(out, v @ params["attn_video.w_v"].data @ params["attn_video.w_o"].data, atol=1e-12)


def test_hand_computed_two_position_attention():
    cfg = ModelConfig(d_model=2, n_heads=1)
    eye = np.eye(2)
    params = ModelParams({f"attn_audio.{w}": DiffTensor(eye.copy()) for w in ("w_q", "w_k", "w_v", "w_o")})
    params.tensors["attn_audio.w_o"] = DiffTensor(np.array([[2.0, 0.0], [0.0, 1.0]]))
    q = np.array([1.0, 0.0])
    kv = np.array([[1.0, 0.0], [0.0, 1.0]])
    # scores 1/sqrt2 and 0; weights e^{s}/(e^{s}+1)
    s = 1 / np.sqrt(2)
    w1 = np.exp(s) / (np.exp(s) + 1)
    expected = np.array([2 * w1, 1 - w1])
    assert np.allclose(cross_attention(q, kv, params, "audio", cfg).data, expected, atol=1e-12)


def test_attention_rejects_bad_widths(cfg_params):
    cfg, params = cfg_params
    with pytest.raises(ShapeError):
        cross_attention(np.ones(5), np.ones(8), params, "audio", cfg)


# --- forward contract --------------------------------------------------------


def make_sample(sid="x", text="school worry grades", severity=10):
    rng = np.random.default_rng(len(sid))
    return Sample(sid, "train", text, rng.normal(size=(7, 3)), rng.normal(size=(5, 2)), severity)


def test_ablation_zero_slot_and_text_passthrough(cfg_params):
    cfg, params = cfg_params
    cfg = ModelConfig(**{**cfg.to_json(), "use_emotion_prompt": False})
    trace = forward(make_sample(), None, params, cfg)
    d = cfg.d_model
    assert np.array_equal(trace.h_final[3 * d :], np.zeros(d))
    assert np.array_equal(trace.h_final[:d], trace.h_t)
    assert np.isfinite(trace.prediction)


def test_text_slot_is_exact_copy(cfg_params):
    cfg, params = cfg_params
    trace = forward(make_sample(), "gloomy negative answers", params, cfg)
    assert np.array_equal(trace.h_final[: cfg.d_model], encode_text("school worry grades", params, cfg).data)


@settings(max_examples=20, deadline=None)
@given(st.text(alphabet="abcdefgh ", min_size=1, max_size=40))
def test_prompt_is_ignored_when_ablated(prompt_text):
    cfg = ModelConfig(audio_dim=3, video_dim=2, d_model=8, n_heads=2, text_vocab_hash_dim=32, use_emotion_prompt=False)
    params = init_params(cfg, seed=4)
    sample = make_sample()
    base = forward(sample, None, params, cfg).raw_prediction
    assert forward(sample, prompt_text, params, cfg).raw_prediction == base


def test_prompt_required_when_enabled(cfg_params):
    cfg, params = cfg_params
    with pytest.raises(PreconditionError):
        forward_batch([make_sample()], None, params, cfg)


def test_clamp():
    cfg = ModelConfig()
    assert clamp_prediction(31.2, cfg) == 24.0
    assert clamp_prediction(-3.0, cfg) == 0.0
    assert clamp_prediction(7.5, cfg) == 7.5
    assert clamp_prediction(31.2, ModelConfig(prediction_clamp=False)) == 31.2


def test_predict_clamps_but_raw_does_not(cfg_params):
    cfg, params = cfg_params
    params.tensors["predictor.b2"].data[:] = 5.0
    sample = make_sample()
    trace = forward(sample, "words", params, cfg)
    assert trace.raw_prediction > 24
    assert trace.prediction == 24.0
    assert predict([sample], ["words"], params, cfg)[0] == 24.0


def test_config_validation():
    with pytest.raises(PreconditionError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(PreconditionError):
        ModelConfig(max_frames=0)
    with pytest.raises(PreconditionError):
        ModelConfig(attention_mode="tokens")


def test_text_and_prompt_share_encoder(cfg_params):
    _, params = cfg_params
    names = [n for n, _ in params.named()]
    assert not any(n.startswith("prompt.") for n in names)
    assert sum(n.startswith("text.") for n in names) == 3


def test_init_is_seeded_and_bounded():
    cfg = ModelConfig()
    a, b = init_params(cfg, seed=3), init_params(cfg, seed=3)
    assert all(np.array_equal(a[n].data, b[n].data) for n, _ in a.named())
    assert np.abs(a["predictor.w1"].data).max() <= 1 / np.sqrt(4 * cfg.d_model)
    assert np.abs(a["text.embedding"].data).max() <= 1.0


# --- CCC loss ----------------------------------------------------------------


def test_ccc_loss_anchors():
    assert ccc_loss([1.0, 2.0, 5.0], [1.0, 2.0, 5.0]).item() == pytest.approx(0.0, abs=1e-15)
    assert ccc_loss([3.0, 3.0, 3.0], [1.0, 2.0, 5.0]).item() == pytest.approx(1.0, abs=1e-15)
    assert ccc_loss([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]).item() == pytest.approx(2.0, abs=1e-15)


def test_ccc_loss_degenerate_is_one_and_connected():
    p = tensor(np.array([2.0, 2.0]), requires_grad=True)
    loss = ccc_loss(p, [2.0, 2.0])
    assert loss.item() == 1.0
    backward(loss)
    assert np.array_equal(p.grad, np.zeros(2))


def test_ccc_loss_preconditions():
    with pytest.raises(PreconditionError):
        ccc_loss([1.0], [1.0])
    with pytest.raises(ShapeError):
        ccc_loss([1.0, 2.0], [1.0, 2.0, 3.0])


pairs = st.integers(2, 24).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(-50, 50, allow_nan=False), min_size=n, max_size=n),
        st.lists(st.floats(-50, 50, allow_nan=False), min_size=n, max_size=n),
    )
)


def well_spread(v):
    return np.std(v) > 1e-3


@settings(max_examples=80, deadline=None)
@given(pairs)
def test_ccc_loss_matches_metric(pair):
    p, y = map(np.array, pair)
    assume(well_spread(p) or well_spread(y))
    assert ccc_loss(p, y).item() == pytest.approx(1.0 - ccc_metric(p, y), abs=1e-12)


@settings(max_examples=80, deadline=None)
@given(pairs)
def test_ccc_loss_symmetric(pair):
    p, y = map(np.array, pair)
    assume(well_spread(p) or well_spread(y))
    assert ccc_loss(p, y).item() == pytest.approx(ccc_loss(y, p).item(), abs=1e-12)


@settings(max_examples=80, deadline=None)
@given(pairs, st.floats(0.1, 10).map(lambda a: a) | st.floats(-10, -0.1), st.floats(-20, 20))
def test_ccc_loss_joint_affine_invariance(pair, a, b):
    p, y = map(np.array, pair)
    assume(well_spread(p) and well_spread(y))
    assert ccc_loss(a * p + b, a * y + b).item() == pytest.approx(ccc_loss(p, y).item(), abs=1e-9)


def test_ccc_loss_not_invariant_to_scaling_one_side():
    p, y = np.array([1.0, 2.0, 4.0, 3.0]), np.array([1.5, 2.0, 3.0, 3.5])
    assert abs(ccc_loss(3 * p, y).item() - ccc_loss(p, y).item()) > 1e-3
    assert abs(ccc_loss(p + 5, y).item() - ccc_loss(p, y).item()) > 1e-3


# --- gradients ---------------------------------------------------------------


def small_batch(small_fixture):
    batch = [s for s in small_fixture.samples if s.split == "train"][:4]
    prompts = ["retrieved texts average -1.20 gloomy", "cheerful positive 2.10", "uneasy balanced mix", "despairing hopeless"]
    return batch, prompts


@pytest.mark.parametrize("use_prompt", [True, False])
def test_full_model_grad_check_pooled(small_fixture, tiny_config, use_prompt):
    batch, prompts = small_batch(small_fixture)
    cfg = ModelConfig(**{**tiny_config.to_json(), "use_emotion_prompt": use_prompt})
    assert model_grad_check(batch, prompts, cfg, seed=1) < 1e-4


@pytest.mark.parametrize("use_prompt", [True, False])
def test_sequence_mode_backward(small_fixture, use_prompt):
    # a small weighted sum of head outputs keeps finite differences well above roundoff
    batch, prompts = small_batch(small_fixture)
    cfg = ModelConfig(audio_dim=5, video_dim=4, d_model=8, n_heads=2, text_vocab_hash_dim=32, max_frames=8,
                      attention_mode="sequence", use_emotion_prompt=use_prompt, output_offset=0.0, output_scale=1.0)
    params = init_params(cfg, seed=1)
    weights = tensor(np.array([0.9, -0.4, 0.3, -0.8]))

    def objective():
        raw = forward_batch(batch, prompts if use_prompt else None, params, cfg).raw_prediction
        return tsum(mul(raw, weights))

    assert grad_check(objective, params.parameters()) < 1e-4


# --- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(d_model=8, n_heads=2, text_vocab_hash_dim=16, attention_mode="sequence")
    params = init_params(cfg, seed=9)
    digest = save_checkpoint(params, cfg, tmp_path / "m.emck")
    assert checkpoint_fingerprint(tmp_path / "m.emck") == digest
    loaded, loaded_cfg = load_checkpoint(tmp_path / "m.emck")
    assert loaded_cfg == cfg
    assert [n for n, _ in loaded.named()] == [n for n, _ in params.named()]
    assert all(np.array_equal(loaded[n].data, params[n].data) for n, _ in params.named())


@pytest.mark.parametrize("damage", [lambda b: b"XXXX" + b[4:], lambda b: b[:-8], lambda b: b + b"\0" * 8])
def test_damaged_checkpoint(tmp_path, damage):
    cfg = ModelConfig(d_model=8, n_heads=2, text_vocab_hash_dim=16)
    save_checkpoint(init_params(cfg), cfg, tmp_path / "m.emck")
    path = tmp_path / "m.emck"
    path.write_bytes(damage(path.read_bytes()))
    with pytest.raises(FormatError):
        load_checkpoint(path)
