import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import softmax

from icnd.classifier import (
    AugmentConfig, ClassifierHyper, CropBatch, HeadConfig, SMGViT, TeacherStudent,
    augment_pair, classify, cls_attention, cls_embedding, distill_step, distill_terms,
    embed_crops, load_classifier, lower_tokens, mask_known_logits, predict, pretrain_step,
    save_classifier, sinkhorn, smg_attention, smg_vit_forward, soft_cross_entropy,
    soft_mask_vector,
)
from icnd.errors import DimensionError, InvalidInputError, UsageError
from icnd.numerics import attention, check_gradients, ops


def tiny_hyper(**kw):
    base = dict(input_px=28, patch=14, dim=8, depth=2, heads=2, j=1, batch=4,
                n_prototypes=6, lr=1e-2)
    base.update(kw)
    return ClassifierHyper(**base)


def tiny_batch(rng, labels, px=28):
    imgs = rng.random((len(labels), px, px))
    masks = np.zeros_like(imgs)
    masks[:, 8:20, 8:20] = rng.random((len(labels), 1, 1))
    return CropBatch(imgs, masks, np.asarray(labels))


# ---------------------------------------------------------------- soft mask vector

def test_soft_mask_vector_trivials():
    np.testing.assert_array_equal(soft_mask_vector(np.zeros((28, 28)), 14), np.zeros(5))
    m = np.zeros((28, 28))
    m[20, 3] = 1.0
    v = soft_mask_vector(m, 14)
    assert v[0] == 1.0
    np.testing.assert_array_equal(v[1:], [0, 0, 1 / 196, 0])
    with pytest.raises(DimensionError):
        soft_mask_vector(np.zeros((30, 28)), 14)


def test_soft_mask_vector_matches_double_loop_pooling():
    rng = np.random.default_rng(0)
    m = rng.random((42, 56))
    p = 14
    pooled = []
    for gy in range(42 // p):
        for gx in range(56 // p):
            s = 0.0
            for y in range(p):
                for x in range(p):
                    s += m[gy * p + y, gx * p + x]
            pooled.append(s / (p * p))
    v = soft_mask_vector(m, p)
    assert v[0] == m.max()
    np.testing.assert_allclose(v[1:], pooled, atol=1e-12, rtol=0)
    assert np.all((v >= 0) & (v <= 1))


# ---------------------------------------------------------------- SMG attention

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 16), c=st.floats(-20, 20))
def test_smg_attention_constant_bias_is_vanilla(seed, c):
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(5, 8)), rng.normal(size=(7, 8)), rng.normal(size=(7, 3))
    vanilla = attention(q, k, v).data
    np.testing.assert_allclose(smg_attention(q, k, v, np.full(7, c)).data, vanilla, atol=1e-12, rtol=0)
    np.testing.assert_array_equal(smg_attention(q, k, v, np.zeros(7)).data, vanilla)


def test_smg_attention_large_entry_takes_the_mass():
    q, k = np.zeros((4, 8)), np.random.default_rng(1).normal(size=(9, 8))
    m_hat = np.zeros(9)
    m_hat[3] = 10.0
    v = np.eye(9)
    out = smg_attention(q, k, v, m_hat).data
    expected = np.exp(10) / (np.exp(10) + 8)
    np.testing.assert_allclose(out[:, 3], expected, rtol=1e-12)
    assert np.all(out[:, 3] > 0.9)
    with pytest.raises(DimensionError):
        smg_attention(q, k, v, np.zeros(8))


# ---------------------------------------------------------------- SMG-ViT

def test_full_depth_smg_with_zero_mask_is_vanilla_vit():
    h = tiny_hyper(j=2)
    model = SMGViT(h)
    crop = np.random.default_rng(2).random((28, 28))
    x, _ = model.base.embed(crop)
    for block in model.base.blocks:
        x, _ = block(x)
    vanilla = cls_embedding(x).data
    np.testing.assert_array_equal(smg_vit_forward(model, crop, np.zeros(5)).data, vanilla)


def test_smg_vit_forward_unit_norm_and_mask_sensitive():
    model = SMGViT(tiny_hyper())
    rng = np.random.default_rng(3)
    crop = rng.random((28, 28))
    z0 = smg_vit_forward(model, crop, np.zeros(5)).data
    z1 = smg_vit_forward(model, crop, np.array([1.0, 0.9, 0.0, 0.2, 0.0])).data
    assert abs(np.linalg.norm(z0) - 1) <= 1e-9
    assert abs(np.linalg.norm(z1) - 1) <= 1e-9
    assert not np.allclose(z0, z1)
    with pytest.raises(DimensionError):
        smg_vit_forward(model, rng.random((42, 42)), np.zeros(10))


def test_hyper_validation():
    with pytest.raises(InvalidInputError):
        tiny_hyper(j=3)
    with pytest.raises(InvalidInputError):
        tiny_hyper(tau_teacher=0.2, tau_student=0.1)
    with pytest.raises(InvalidInputError):
        HeadConfig(-1, 2)
    hc = HeadConfig(3, 2)
    assert hc.total == 6 and hc.unlabeled_slice == slice(4, 6)


# ---------------------------------------------------------------- augmentation

def test_augment_zero_strength_is_identity_and_seeded():
    rng = np.random.default_rng(4)
    img, mask = rng.random((28, 28)), rng.random((28, 28))
    (a, ma), (b, mb) = augment_pair(img, mask, 0, AugmentConfig.none())
    for x in (a, b):
        np.testing.assert_array_equal(x, img)
    for m in (ma, mb):
        np.testing.assert_array_equal(m, mask)
    p1, p2 = augment_pair(img, mask, 9), augment_pair(img, mask, 9)
    for (u, mu), (w, mw) in zip(p1, p2):
        np.testing.assert_array_equal(u, w)
        np.testing.assert_array_equal(mu, mw)
    assert not np.array_equal(p1[0][0], img)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 16))
def test_augment_moves_mask_with_image(seed):
    # a mask equal to the image must stay equal to it under every geometric transform
    img = np.random.default_rng(seed).random((28, 28))
    cfg = AugmentConfig(area=(0.5, 1.0), flip=True, brightness=0.0, contrast=0.0, noise=0.0)
    for view, mask in augment_pair(img, img, seed, cfg):
        np.testing.assert_array_equal(view, mask)


def test_flip_applies_to_both():
    img = np.tile(np.linspace(0, 1, 28), (28, 1))
    cfg = AugmentConfig(area=(1.0, 1.0), flip=True, brightness=0.0, contrast=0.0, noise=0.0)
    flipped = 0
    for seed in range(20):
        for view, mask in augment_pair(img, img.T, seed, cfg):
            if not np.array_equal(view, img):
                flipped += 1
                np.testing.assert_array_equal(view, img[:, ::-1])
                np.testing.assert_array_equal(mask, img.T[:, ::-1])
            else:
                np.testing.assert_array_equal(mask, img.T)
    assert 0 < flipped < 40


# ---------------------------------------------------------------- Sinkhorn / masking

@pytest.mark.parametrize("shape", [(1, 1), (5, 3), (16, 16), (64, 16), (64, 2), (7, 12)])
def test_sinkhorn_marginals(shape):
    rng = np.random.default_rng(shape[0] * 100 + shape[1])
    for _ in range(10):
        q = sinkhorn(rng.normal(size=shape) * 3, iters=200, temp=1.0)
        assert np.abs(q.sum(1) - 1).max() <= 1e-6
        assert np.abs(q.sum(0) - shape[0] / shape[1]).max() <= 1e-3


def test_sinkhorn_uniform_and_diagonal():
    np.testing.assert_allclose(sinkhorn(np.zeros((8, 4)), 3), 0.25, atol=1e-15)
    q = sinkhorn(5 * np.eye(6), 50, 0.5)
    assert np.all(np.diag(q) > 0.9)
    with pytest.raises(InvalidInputError):
        sinkhorn(np.array([[0.0, np.inf]]))
    with pytest.raises(InvalidInputError):
        sinkhorn(np.zeros((2, 2)), iters=0)


def test_mask_known_logits():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(4, 6))
    unl = np.array([False, True, False, True])
    out = mask_known_logits(logits, unl, 3)
    np.testing.assert_array_equal(out[~unl], logits[~unl])
    p = softmax(out, axis=1)
    assert np.all(p[unl][:, 1:4] == 0)
    np.testing.assert_allclose(softmax(mask_known_logits(np.zeros((1, 6)), [True], 3), axis=1),
                               [[1 / 3, 0, 0, 0, 1 / 3, 1 / 3]])


# ---------------------------------------------------------------- losses

def test_self_consistency_cross_entropy_is_entropy():
    h = tiny_hyper(augment=AugmentConfig.none())
    ts = TeacherStudent(h, HeadConfig(2, 1), seed=0)
    b = tiny_batch(np.random.default_rng(6), [0, 1, 2, -1])
    x = lower_tokens(ts.student, b.images)
    m = soft_mask_vector(b.masks, h.patch)
    t = ts.teacher_head(ops.lift(ts.teacher_embed(x, m)[0])).data
    s = ts.head(ts.student_embed(x, m))
    np.testing.assert_array_equal(t, s.data)
    tau = 0.3
    p = softmax(t / tau, axis=1)
    entropy = -(p * np.log(p)).sum(1).mean()
    assert float(soft_cross_entropy(p, s, tau).data) == pytest.approx(entropy, abs=1e-12)


def test_labeled_only_batch_has_no_sinkhorn_term():
    ts = TeacherStudent(tiny_hyper(), HeadConfig(2, 2), seed=1)
    _, sup, pseudo = distill_terms(ts, tiny_batch(np.random.default_rng(7), [0, 1, 2, 1]), 0)
    assert float(pseudo.data) == 0.0
    assert float(sup.data) > 0


@pytest.mark.parametrize("term", [0, 2], ids=["distill", "sinkhorn"])
def test_loss_gradients_match_finite_differences(term):
    worst = 0.0
    for inst in range(20):
        rng = np.random.default_rng(100 + inst)
        h = tiny_hyper(dim=4, heads=1, backbone_seed=inst, augment=AugmentConfig.none())
        ts = TeacherStudent(h, HeadConfig(1, 2), seed=inst)
        # move the student off the teacher so the two disagree
        for p in ts.student_params("full"):
            p.data = p.data + 0.1 * rng.normal(size=p.data.shape)
        b = tiny_batch(rng, [0, 1, -1, -1])
        params = ts.student_params("full")
        worst = max(worst, check_gradients(lambda: distill_terms(ts, b, inst, "full")[term], params))
    assert worst <= 1e-4


# ---------------------------------------------------------------- training loop

def test_teacher_follows_unrolled_ema_and_frozen_layers_stay_put():
    h = tiny_hyper(momentum=0.9)
    ts = TeacherStudent(h, HeadConfig(2, 1), seed=2)
    frozen_before = [p.data.copy() for p in ts.student.frozen_params()]
    teacher0 = [p.data.copy() for p in ts.teacher_params("full")]
    history = []
    rng = np.random.default_rng(8)
    for step in range(10):
        distill_step(ts, tiny_batch(rng, [0, 1, 2, -1]), step, stage="full")
        history.append([p.data.copy() for p in ts.student_params("full")])
    m = h.momentum
    for i, t in enumerate(ts.teacher_params("full")):
        oracle = m ** 10 * teacher0[i]
        for n, snap in enumerate(history, start=1):
            oracle = oracle + (1 - m) * m ** (10 - n) * snap[i]
        np.testing.assert_allclose(t.data, oracle, atol=1e-10, rtol=0)
    pretrain_step(ts, tiny_batch(rng, [0, 1, 2, -1]), 11)
    distill_step(ts, tiny_batch(rng, [0, 1, 2, -1]), 12, stage="heads")
    for before, p in zip(frozen_before, ts.student.frozen_params()):
        assert np.array_equal(before, p.data)
        assert p.grad is None


def test_classify_contract_and_checkpoint_round_trip(tmp_path):
    ts = TeacherStudent(tiny_hyper(), HeadConfig(2, 1), seed=3)
    b = tiny_batch(np.random.default_rng(9), [0, 1, 2, -1])
    with pytest.raises(UsageError):
        classify(ts, b.images[0], b.masks[0])
    for s in range(3):
        distill_step(ts, b, s, stage="full")
    probs = predict(ts, b.images, b.masks)
    assert probs.shape == (4, 4)
    np.testing.assert_allclose(probs.sum(1), 1, atol=1e-12)
    k, conf = classify(ts, b.images[0], b.masks[0])
    assert 0 <= conf <= 1 and k == int(np.argmax(probs[0]))
    logits = ts.teacher_head(ops.lift(embed_crops(ts, b.images, b.masks))).data
    np.testing.assert_array_equal(probs.argmax(1), logits.argmax(1))

    save_classifier(ts, tmp_path / "c.ckpt", extra={"k_hat": 5})
    ts2, extra = load_classifier(tmp_path / "c.ckpt")
    assert extra == {"k_hat": 5}
    np.testing.assert_array_equal(predict(ts2, b.images, b.masks), probs)
    np.testing.assert_array_equal(cls_attention(ts2, b.images, b.masks), cls_attention(ts, b.images, b.masks))


def test_cls_attention_is_a_distribution_over_patches():
    ts = TeacherStudent(tiny_hyper(input_px=42), HeadConfig(1, 1), seed=4)
    b = tiny_batch(np.random.default_rng(10), [0, 1, -1], px=42)
    a = cls_attention(ts, b.images, b.masks)
    assert a.shape == (3, 9)
    assert np.all(a > 0) and np.all(a.sum(1) < 1)


def test_head_stage_needs_a_head():
    ts = TeacherStudent(tiny_hyper(), None, seed=5)
    with pytest.raises(UsageError):
        distill_step(ts, tiny_batch(np.random.default_rng(11), [0, -1]), 0)
    pretrain_step(ts, tiny_batch(np.random.default_rng(11), [0, -1]), 0)
    assert ts.step == 1


def synthetic_crops(rng, n_per_class, px=28):
    """Three easy classes: bright square, dark square, bright bar, with matching soft masks."""
    imgs, masks, labels = [], [], []
    for c in range(3):
        for _ in range(n_per_class):
            img = 0.5 + 0.05 * rng.normal(size=(px, px))
            m = np.zeros((px, px))
            y, x = rng.integers(4, px - 12, size=2)
            if c == 2:
                m[y:y + 3, 2:px - 2] = 1
            else:
                m[y:y + 8, x:x + 8] = 1
            img = np.clip(img + (0.3 if c != 1 else -0.3) * m, 0, 1)
            imgs.append(img)
            masks.append(m)
            labels.append(c + 1)
    return np.array(imgs), np.array(masks), np.array(labels)


def test_short_training_separates_three_labeled_classes():
    from icnd.class_count import matched_accuracy

    rng = np.random.default_rng(12)
    X, M, Y = synthetic_crops(rng, 20)
    # views without augmentation: the loop itself is under test, not invariance learning
    h = tiny_hyper(dim=16, heads=2, batch=12, lr=3e-3, momentum=0.9, augment=AugmentConfig.none())
    ts = TeacherStudent(h, HeadConfig(3, 0), seed=0)
    for s in range(300):
        idx = rng.choice(len(Y), h.batch, replace=False)
        distill_step(ts, CropBatch(X[idx], M[idx], Y[idx]), s, stage="full")
    pred = predict(ts, X, M).argmax(1)
    assert matched_accuracy(pred, Y) >= 0.8
