import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qvqa import tensor as T
from qvqa.data.vocab import CLS, PAD, SEP
from qvqa.encoders import TextEncoder, TextEncoderConfig, VisualEncoder, VisualEncoderConfig, patchify
from qvqa.generator import ContextOverflow, Generator, GeneratorConfig, prefix_causal_mask
from qvqa.model import QVQAModel
from qvqa.qft import QFT, QFTConfig, fuse_pair
from qvqa.tensor.nn import MultiHeadAttention

from .conftest import tiny_model_config

D = 16


def visual(rng_seed=0, **kw):
    cfg = VisualEncoderConfig(image_size=16, patch_size=4, d_model=D, n_layers=1, n_heads=2, **kw)
    return VisualEncoder(cfg, np.random.default_rng(rng_seed))


def text_encoder(vocab=20):
    return TextEncoder(TextEncoderConfig(vocab, max_len=12, d_model=D, n_layers=1, n_heads=2), np.random.default_rng(0))


def generator(vocab=20, prefix=4):
    cfg = GeneratorConfig(vocab, d_model=D, n_layers=1, n_heads=2, prefix_len=prefix, max_text_len=12, max_gen_len=6)
    return Generator(cfg, np.random.default_rng(0))


# patchify --------------------------------------------------------------------


def test_patchify_desk_shape():
    assert patchify(np.zeros((64, 64)), 8).shape == (64, 64)


def test_patchify_constant_image():
    p = patchify(np.full((16, 16), 2.5), 8).data
    assert p.shape == (4, 64)
    assert (p == 2.5).all()


def test_patchify_locality():
    img = np.zeros((16, 16))
    img[0, 0] = 1.0
    p = patchify(img, 8).data
    assert p[0].any() and not p[1:].any()


@given(st.integers(0, 15), st.integers(0, 15))
def test_patchify_raster_order(r, c):
    img = np.zeros((16, 16))
    img[r, c] = 1.0
    p = patchify(img, 4).data
    k, j = np.argwhere(p)[0]
    assert k == (r // 4) * 4 + c // 4
    assert j == (r % 4) * 4 + c % 4


def test_patchify_rejects_bad_dims():
    with pytest.raises(T.ShapeError):
        patchify(np.zeros((10, 10)), 4)
    with pytest.raises(T.ShapeError):
        patchify(np.zeros((8, 12)), 4)


def test_encoder_config_invariants():
    with pytest.raises(ValueError):
        VisualEncoderConfig(image_size=10, patch_size=4)
    with pytest.raises(ValueError):
        VisualEncoderConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        VisualEncoderConfig(image_size=8, patch_size=8)  # a single patch
    with pytest.raises(ValueError):
        TextEncoderConfig(vocab_size=3)


# visual encoder --------------------------------------------------------------


def test_encode_image_shapes(rng):
    V, v = visual()(rng.standard_normal((16, 16)))
    assert V.shape == (1, D) and v.shape == (1, 16, D)


def test_encode_image_deterministic(rng):
    img = rng.standard_normal((16, 16))
    enc = visual()
    a, b = enc(img), enc(img.copy())
    np.testing.assert_array_equal(a[0].data, b[0].data)
    np.testing.assert_array_equal(a[1].data, b[1].data)


def test_mean_pool_is_patch_permutation_invariant_without_positions(rng):
    enc = visual()
    enc.use_positions = False
    img = rng.standard_normal((16, 16))
    swapped = img.copy()
    swapped[0:4, 0:4], swapped[12:16, 12:16] = img[12:16, 12:16], img[0:4, 0:4]
    (V1, v1), (V2, v2) = enc(img), enc(swapped)
    assert not np.allclose(v1.data, v2.data)
    np.testing.assert_allclose(V1.data, V2.data, atol=1e-5)


def test_cls_pooling_option(rng):
    V, v = visual(pool="cls")(rng.standard_normal((2, 16, 16)))
    assert V.shape == (2, D) and v.shape == (2, 16, D)


def test_gradient_reaches_pixels(rng):
    enc = visual()
    img = T.Tensor(rng.standard_normal((1, 16, 16)), requires_grad=True)
    V, _ = enc(img)
    T.sum_(T.mul(V, T.Tensor(rng.standard_normal(V.shape)))).backward()
    assert img.grad is not None and np.abs(img.grad).max() > 0


# text encoder ----------------------------------------------------------------


def test_encode_text_shapes():
    Tg, t = text_encoder()([[CLS, 7, SEP]])
    assert Tg.shape == (1, D) and t.shape == (1, 3, D)


def test_encode_text_deterministic():
    enc = text_encoder()
    np.testing.assert_array_equal(enc([[CLS, 5, 6, SEP]])[0].data, enc([[CLS, 5, 6, SEP]])[0].data)


def test_masked_pad_leaves_cls_unchanged():
    enc = text_encoder()
    ids = np.array([[CLS, 5, 9, SEP]])
    padded = np.array([[CLS, 5, 9, SEP, PAD]])
    mask = np.array([[True, True, True, True, False]])
    a = enc(ids)[0].data
    b = enc(padded, mask)[0].data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_batch_padding_matches_single():
    enc = text_encoder()
    short, long = [CLS, 5, SEP], [CLS, 6, 7, 8, SEP]
    both = enc([short, long])[0].data
    np.testing.assert_allclose(both[0], enc([short])[0].data[0], atol=1e-6)


def test_text_rejects_oov_and_overlong():
    enc = text_encoder(vocab=20)
    with pytest.raises(ValueError):
        enc([[CLS, 20, SEP]])
    with pytest.raises(ValueError):
        enc([[CLS] + [5] * 12 + [SEP]])


def test_gradient_reaches_token_embeddings():
    enc = text_encoder()
    Tg, _ = enc([[CLS, 5, 6, SEP]])
    T.sum_(T.mul(Tg, Tg)).backward()
    assert np.abs(enc.tok.grad).max() > 0


def test_attention_rows_sum_to_one_after_masking(rng):
    attn = MultiHeadAttention(D, 2, np.random.default_rng(0))
    x = T.Tensor(rng.standard_normal((2, 5, D)))
    allowed = np.tril(np.ones((5, 5), dtype=bool))
    attn.record = True
    attn(x, allowed=allowed)
    probs = attn.last_weights
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)
    assert (probs[..., ~allowed] < 1e-6).all()


# QFT -------------------------------------------------------------------------


def qft(m=4, P=16):
    return QFT(QFTConfig(m=m, d_model=D, n_layers=2, n_heads=2), P, np.random.default_rng(1))


def test_qft_shape(rng):
    assert qft()(T.Tensor(rng.standard_normal((3, 16, D)))).shape == (3, 4, D)


def test_qft_bottleneck_enforced():
    with pytest.raises(ValueError):
        qft(m=16, P=16)
    with pytest.raises(ValueError):
        qft(m=1)


def test_qft_duplicated_patches_leave_output_unchanged(rng):
    v = rng.standard_normal((1, 16, D))
    net = qft()
    a = net(T.Tensor(v)).data
    b = net(T.Tensor(np.concatenate([v, v], axis=1))).data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_qft_permuting_patches_leaves_output_unchanged(rng):
    v = rng.standard_normal((1, 16, D))
    net = qft()
    perm = rng.permutation(16)
    np.testing.assert_allclose(net(T.Tensor(v)).data, net(T.Tensor(v[:, perm])).data, atol=1e-5)


def test_qft_zero_value_projection_cuts_information(rng):
    net = qft()
    for block in net.blocks:
        block.cross.v.weight.data[...] = 0
        block.cross.v.bias.data[...] = 0
    a = net(T.Tensor(rng.standard_normal((1, 16, D)))).data
    b = net(T.Tensor(rng.standard_normal((1, 16, D)))).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_qft_output_depends_on_input(rng):
    net = qft()
    a = net(T.Tensor(rng.standard_normal((1, 16, D)))).data
    b = net(T.Tensor(rng.standard_normal((1, 16, D)))).data
    assert not np.allclose(a, b)


def test_fuse_pair_rules(rng):
    X = rng.standard_normal((4, D))
    Va, Vb = rng.standard_normal(D), rng.standard_normal(D)
    Q_avg, Q_cat, V_avg = fuse_pair(X, X, Va, Vb)
    np.testing.assert_array_equal(Q_avg.data, X)
    np.testing.assert_array_equal(Q_cat.data, np.vstack([X, X]))
    Q_avg, _, _ = fuse_pair(X, -X, Va, Vb)
    assert not Q_avg.data.any()


@given(st.integers(0, 2**31))
def test_fuse_pair_matches_scalar_loop(seed):
    rng = np.random.default_rng(seed)
    Qa, Qb = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    Va, Vb = rng.standard_normal(4), rng.standard_normal(4)
    with T.default_dtype(np.float64):
        Q_avg, Q_cat, V_avg = fuse_pair(T.Tensor(Qa), T.Tensor(Qb), T.Tensor(Va), T.Tensor(Vb))
    for i in range(3):
        for j in range(4):
            assert Q_avg.data[i, j] == (Qa[i, j] + Qb[i, j]) / 2
            assert Q_cat.data[i, j] == Qa[i, j] and Q_cat.data[3 + i, j] == Qb[i, j]
    for j in range(4):
        assert V_avg.data[j] == (Va[j] + Vb[j]) / 2


def test_gradient_reaches_queries_and_visual_encoder(small_world):
    _, vocab, enc = small_world
    model = QVQAModel(tiny_model_config(len(vocab)))
    out = model.encode_images(np.stack([s.images for s in enc[:2]]))
    T.sum_(T.mul(out["Q_avg"], out["Q_avg"])).backward()
    assert np.abs(model.qft.queries.grad).max() > 0
    assert np.abs(model.visual.patch_embed.weight.grad).max() > 0


# generator -------------------------------------------------------------------


def test_prefix_mask_layout():
    m = prefix_causal_mask(2, 3)
    assert m[:2, :2].all() and not m[:2, 2:].any()
    assert m[2:, :2].all()
    np.testing.assert_array_equal(m[2:, 2:], np.tril(np.ones((3, 3), bool)))


def test_condition_and_score_shape(rng):
    gen = generator()
    logits = gen.condition_and_score(T.Tensor(rng.standard_normal((4, D))), [5, 6, SEP], [7])
    assert logits.shape == (1, 20)


def test_permuting_prefix_rows_changes_logits(rng):
    gen = generator()
    Q = rng.standard_normal((4, D))
    a = gen.condition_and_score(T.Tensor(Q), [5, SEP], [7, 8]).data
    b = gen.condition_and_score(T.Tensor(Q[::-1].copy()), [5, SEP], [7, 8]).data
    assert not np.allclose(a, b)


def test_zero_prefix_depends_only_on_text():
    gen = generator()
    zero = T.zeros((4, D))
    a = gen.condition_and_score(zero, [5, SEP], [7, 8]).data
    b = gen.condition_and_score(zero, [5, SEP], [7, 8]).data
    c = gen.condition_and_score(zero, [6, SEP], [7, 8]).data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


@given(st.integers(0, 3), st.integers(5, 19))
def test_causality(pos, new_token):
    gen = generator()
    Q = T.Tensor(np.random.default_rng(3).standard_normal((4, D)))
    answer = [7, 8, 9, 10, 11]
    changed = list(answer)
    changed[pos + 1] = new_token
    a = gen.condition_and_score(Q, [5, SEP], answer).data
    b = gen.condition_and_score(Q, [5, SEP], changed).data
    # logits at answer position j see y_<j, so position pos+1's token can only affect rows > pos+1
    np.testing.assert_allclose(a[: pos + 2], b[: pos + 2], atol=1e-6)


def test_prefix_visible_at_every_answer_position(rng):
    gen = generator()
    a = gen.condition_and_score(T.Tensor(rng.standard_normal((4, D))), [5, SEP], [7, 8, 9]).data
    b = gen.condition_and_score(T.Tensor(rng.standard_normal((4, D))), [5, SEP], [7, 8, 9]).data
    assert all(not np.allclose(a[j], b[j]) for j in range(3))


def test_context_overflow_reports_lengths(rng):
    gen = generator()
    with pytest.raises(ContextOverflow, match="12"):
        gen.condition_and_score(T.Tensor(rng.standard_normal((4, D))), [5] * 8, [6] * 6)


def test_generate_terminates_and_is_deterministic(rng):
    gen = generator()
    Q = T.Tensor(rng.standard_normal((4, D)))
    a = gen.generate(Q, [5, SEP])
    assert len(a) <= 6
    assert a == gen.generate(Q, [5, SEP])


def test_generate_batch_matches_single(rng):
    gen = generator()
    Q = rng.standard_normal((2, 4, D))
    batch = gen.generate(T.Tensor(Q), [[5, SEP], [6, 7, SEP]])
    assert batch[0] == gen.generate(T.Tensor(Q[0]), [5, SEP])
    assert batch[1] == gen.generate(T.Tensor(Q[1]), [6, 7, SEP])


def test_generator_overfits_one_sample():
    from qvqa.trainer import AdamW

    gen = generator()
    Q = T.Tensor(np.random.default_rng(4).standard_normal((4, D)))
    question, answer = [5, SEP], [9, 12, 7, 3]  # 3 is [EOS]
    opt = AdamW(gen.parameters(), lr=1e-2)
    for _ in range(150):
        opt.zero_grad()
        logits, tgt, mask = gen.score_batch(T.reshape(Q, (1, 4, D)), [question], [answer])
        T.cross_entropy(logits, tgt, mask).backward()
        opt.step()
    assert gen.generate(Q, question) == answer[:-1]
