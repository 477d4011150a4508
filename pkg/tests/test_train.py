import math

import numpy as np
import pytest

from lmcompress.corpus import split_corpus, synthetic_corpus
from lmcompress.data import build_vocab, encode
from lmcompress.errors import DivergenceError, NumericError, ShapeError
from lmcompress.model import ModelConfig, init_model, perplexity
from lmcompress.train import (
    AdamState,
    TrainConfig,
    adam_step,
    bptt_gradients,
    clip_by_global_norm,
    cross_entropy_loss,
    grad_check,
    train,
)

from conftest import tiny_model


def test_cross_entropy_examples(rng):
    V = 9
    assert abs(cross_entropy_loss(np.zeros((2, 3, V)), np.zeros((2, 3), int)) - math.log(V)) < 1e-12
    conf = np.full((1, 2, V), -1e3)
    conf[0, 0, 4] = conf[0, 1, 2] = 1e3
    assert cross_entropy_loss(conf, np.array([[4, 2]])) < 1e-12
    logits = rng.normal(size=(2, 3, V))
    targets = rng.integers(0, V, size=(2, 3))
    ref = 0.0
    for b in range(2):
        for t in range(3):
            row = logits[b, t]
            ref -= row[targets[b, t]] - math.log(sum(math.exp(z) for z in row))
    assert abs(cross_entropy_loss(logits, targets) - ref / 6) < 1e-12
    with pytest.raises(ShapeError):
        cross_entropy_loss(logits, targets[:, :2])


# Pinned conditioning for the finite-difference comparison: init_scale 2.0 keeps
# every gradient coordinate well above the roundoff floor of h = 1e-5.
GRAD_CASES = [("dense-lstm", {}), ("lowrank-lstm", {"k": 6, "embed": 6}), ("tt-lstm", {}), ("dense-rnn", {})]


@pytest.mark.parametrize("kind,kw", GRAD_CASES)
def test_gradients_match_finite_differences(kind, kw):
    model = tiny_model(kind, seed=0, **kw)
    n = sum(p.size for p in model.named_params().values())
    assert n <= 5000
    ids = np.random.default_rng(0).integers(0, 7, size=(4, 4))
    report = grad_check(model, ids[:, :3], ids[:, 1:])
    assert report.checked == n
    assert report.max_rel_error < 1e-4, report


def test_gradients_with_carried_state():
    model = tiny_model(seed=1)
    ids = np.random.default_rng(1).integers(0, 7, size=(4, 7))
    _, _, state = bptt_gradients(model, ids[:, :3], ids[:, 1:4])
    loss, grads, _ = bptt_gradients(model, ids[:, 3:6], ids[:, 4:7], state)
    from lmcompress.model import batch_nll, forward

    p = model.softmax_w
    h = 1e-6
    old = p[2, 1]
    p[2, 1] = old + h
    up = batch_nll(forward(model, ids[:, 3:6], state)[0], ids[:, 4:7]).mean()
    p[2, 1] = old - h
    down = batch_nll(forward(model, ids[:, 3:6], state)[0], ids[:, 4:7]).mean()
    p[2, 1] = old
    assert abs((up - down) / (2 * h) - grads["softmax.W"][2, 1]) < 1e-8


def test_unseen_token_embedding_gradient_is_zero():
    model = tiny_model()
    for p in model.named_params().values():
        p[...] = 0
    ids = np.array([[1, 2, 3], [3, 2, 1]])
    _, grads, _ = bptt_gradients(model, ids, ids)
    assert np.all(grads["embedding"][[0, 4, 5, 6]] == 0)


def test_duplicated_batch_doubles_summed_gradients():
    model = tiny_model(scale=0.5)
    ids = np.random.default_rng(3).integers(0, 7, size=(2, 5))
    _, g1, _ = bptt_gradients(model, ids[:, :4], ids[:, 1:])
    dup = np.concatenate([ids, ids])
    _, g2, _ = bptt_gradients(model, dup[:, :4], dup[:, 1:])
    # the loss is a mean over B x N, so sum-scaled gradients double
    for k in g1:
        assert np.max(np.abs(g2[k] * 16 - 2 * g1[k] * 8)) < 1e-10


def test_non_finite_loss_raises():
    model = tiny_model()
    model.softmax_b[0] = np.nan
    with pytest.raises(NumericError):
        bptt_gradients(model, np.zeros((1, 2), int), np.zeros((1, 2), int), step=7)


def test_adam_zero_grads_and_first_step():
    cfg = TrainConfig(lr=0.01)
    p = {"a": np.array([1.0, -2.0, 3.0])}
    st = AdamState.zeros_like(p)
    adam_step(p, {"a": np.zeros(3)}, st, cfg)
    assert np.array_equal(p["a"], [1.0, -2.0, 3.0])
    p = {"a": np.zeros(3)}
    st = AdamState.zeros_like(p)
    c = np.array([0.5, -2.0, 1e-3])
    adam_step(p, {"a": c.copy()}, st, cfg)
    # bias correction gives m_hat = c and v_hat = c^2 on the first step
    assert np.max(np.abs(p["a"] - (-cfg.lr * c / (np.abs(c) + cfg.eps)))) < 1e-15


def test_clip_halves_norm_ten():
    g = {"a": np.array([6.0, 0.0]), "b": np.array([[8.0]])}
    assert clip_by_global_norm(g, 5.0) == 10.0
    assert np.allclose(g["a"], [3.0, 0.0]) and np.allclose(g["b"], [[4.0]])
    g = {"a": np.array([1.0])}
    clip_by_global_norm(g, 5.0)
    assert g["a"][0] == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(clip=0)


@pytest.fixture(scope="module")
def tiny_task():
    text = synthetic_corpus(50_000, seed=5)
    tr, va, _ = split_corpus(text)
    vocab = build_vocab(tr, 10000)
    return vocab, encode(vocab, tr), encode(vocab, va)


def test_lr_zero_leaves_model_unchanged(tiny_task):
    vocab, tr, va = tiny_task
    model = init_model(ModelConfig(1, 16, 16, len(vocab)), vocab, seed=0)
    before = {k: v.copy() for k, v in model.named_params().items()}
    rep = train(model, tr, va, TrainConfig(lr=0.0, epochs=2, batch_size=10, unroll=20))
    assert all(np.array_equal(before[k], v) for k, v in model.named_params().items())
    assert abs(rep.epochs[0].valid_pp - rep.epochs[1].valid_pp) <= 1e-9 * rep.epochs[0].valid_pp


def test_training_beats_uniform_and_is_deterministic(tiny_task):
    vocab, tr, va = tiny_task
    cfg = TrainConfig(lr=2e-3, epochs=10, batch_size=10, unroll=20)
    runs = []
    for _ in range(2):
        model = init_model(ModelConfig(2, 64, 64, len(vocab), init_scale=0.1), vocab, seed=0)
        rep = train(model, tr, va, cfg)
        runs.append((model, rep))
    (m1, r1), (m2, r2) = runs
    assert len(r1.epochs) == 10
    assert r1.final_valid_pp < len(vocab)
    assert [e.valid_pp for e in r1.epochs] == [e.valid_pp for e in r2.epochs]
    assert all(np.array_equal(a, b) for a, b in zip(m1.named_params().values(), m2.named_params().values()))


def test_masked_training_keeps_zeros(tiny_task):
    from lmcompress.compress import prune_model

    vocab, tr, va = tiny_task
    model = init_model(ModelConfig(1, 16, 16, len(vocab)), vocab, seed=0)
    pruned, mask = prune_model(model, 0.8, ("output", "recurrent"))
    zeros = {k: pruned.named_params()[k] == 0 for k in mask.masks}
    train(pruned, tr, va, TrainConfig(lr=1e-2, epochs=1, batch_size=10, unroll=20), masks=mask.masks)
    for k, z in zeros.items():
        assert np.array_equal(pruned.named_params()[k] == 0, z)


def test_loss_perplexity_consistency():
    model = tiny_model(scale=0.5)
    B, N = 3, 5
    stream = np.random.default_rng(9).integers(0, 7, size=B * (N + 1))
    stripes = stream.reshape(B, N + 1)
    loss, _, _ = bptt_gradients(model, stripes[:, :-1], stripes[:, 1:])
    pp = perplexity(model, stream, B, N)
    assert abs(math.exp(loss) - pp) <= 1e-9 * pp


def test_divergence_detected():
    model = tiny_model(k=8, embed=8, n_vocab=20, scale=0.1)
    s = np.random.default_rng(0).integers(0, 20, size=400)
    with pytest.raises(DivergenceError):
        train(model, s, s[:100], TrainConfig(lr=50, clip=1e6, epochs=6, batch_size=4, unroll=5))


def test_mask_shape_mismatch():
    model = tiny_model()
    with pytest.raises(ShapeError):
        train(model, np.arange(50) % 7, np.arange(20) % 7, TrainConfig(epochs=1, batch_size=2, unroll=3),
              masks={"softmax.W": np.ones((2, 2))})
