import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from knowledge_conflict.model import build_perfect_solver
from knowledge_conflict.numerics import finite_diff_grad, make_rng, relative_error
from knowledge_conflict.tasks import Kind, TaskError, build_vocab, generate_sequence, training_dataset
from knowledge_conflict.training import (
    Attention,
    LinearAttnModel,
    TrainConfig,
    TrainingDivergence,
    cross_entropy,
    forward_linear,
    gd_train,
    gradients,
    measure_signals,
    prepare_inputs,
    strict_embeddings,
)

from conftest import SOLVER_CONSTS

LINEAR = TrainConfig(attention=Attention.LINEAR)


@pytest.fixture(scope="module")
def setup(vocab):
    emb = strict_embeddings(vocab)
    data = training_dataset(vocab, 8, make_rng(1))
    return emb, prepare_inputs(vocab, data, emb)


def _random_model(emb, rng, scale=1.0):
    d = emb.phi.shape[0]
    return LinearAttnModel(
        rng.standard_normal((d, d)) * scale / np.sqrt(d), rng.standard_normal((d, d)) * scale / np.sqrt(d), emb
    )


def test_prepare_inputs_columns(vocab, setup):
    emb, batch = setup
    for X, seq in zip(batch.X[:3], batch.sequences[:3]):
        z = seq.tokens
        assert np.array_equal(X[:, 0], emb.phi[:, z[0]])
        assert np.array_equal(X[:, -1], emb.phi[:, vocab.trigger])
        i = seq.subject_pos
        if 0 < i < 7:
            assert np.array_equal(X[:, i], emb.phi[:, z[i]] + emb.phi_prime[:, z[i - 1]])


def test_prepare_inputs_rejects(vocab):
    emb = strict_embeddings(vocab)
    with pytest.raises(TaskError):
        prepare_inputs(vocab, [generate_sequence(vocab, Kind.CONFLICT, 8, make_rng(0))], emb)
    other = build_vocab(2, 8, make_rng(0))
    with pytest.raises(TaskError):
        prepare_inputs(vocab, [generate_sequence(other, Kind.FACTUAL, 8, make_rng(0))], emb)


def test_forward_linear_basics(setup):
    emb, batch = setup
    rng = make_rng(2)
    m = _random_model(emb, rng)
    X = batch.X[0]
    zero_ov = LinearAttnModel(m.W_KQ, np.zeros_like(m.W_OV), emb)
    assert np.all(forward_linear(zero_ov, X)[0] == 0.0)
    doubled = LinearAttnModel(m.W_KQ, 2 * m.W_OV, emb)
    np.testing.assert_allclose(forward_linear(doubled, X)[0], 2 * forward_linear(m, X)[0], rtol=1e-13)
    sigma = forward_linear(LinearAttnModel.zeros(emb), X)[1]
    assert np.all(sigma == 1 / 8)


def test_zero_ov_gives_exactly_zero_kq_gradient(setup):
    emb, batch = setup
    m = _random_model(emb, make_rng(3))
    m = LinearAttnModel(m.W_KQ, np.zeros_like(m.W_OV), emb)
    for X, y in zip(batch.X, batch.y):
        assert np.all(gradients(m, X, int(y))[1] == 0.0)


def test_single_factual_signal(vocab, setup):
    emb, batch = setup
    k = next(n for n, kind in enumerate(batch.kinds) if kind is Kind.FACTUAL)
    seq = batch.sequences[k]
    neg_ov, _ = gradients(LinearAttnModel.zeros(emb), batch.X[k], int(batch.y[k]))
    N = vocab.size
    s = seq.tokens[seq.subject_pos]
    val = emb.mu[:, seq.parametric_answer] @ neg_ov @ emb.phi[:, s]
    assert val == pytest.approx((N - 1) / (N * 8), rel=1e-14)


@given(st.integers(0, 10_000))
def test_gradients_match_finite_differences(seed):
    v = build_vocab(2, 6, make_rng(seed))
    emb = strict_embeddings(v)
    rng = make_rng(seed + 1)
    data = prepare_inputs(v, training_dataset(v, 6, rng), emb)
    k = int(rng.integers(0, len(data)))
    X, y = data.X[k], int(data.y[k])
    m = _random_model(emb, rng)
    neg_ov, neg_kq = gradients(m, X, y, LINEAR)
    fd_ov = finite_diff_grad(lambda W: cross_entropy(LinearAttnModel(m.W_KQ, W, emb), X, y, LINEAR), m.W_OV)
    fd_kq = finite_diff_grad(lambda W: cross_entropy(LinearAttnModel(W, m.W_OV, emb), X, y, LINEAR), m.W_KQ)
    assert relative_error(-neg_ov, fd_ov) < 1e-5
    assert relative_error(-neg_kq, fd_kq) < 1e-5


def test_step_one(vocab, setup):
    emb, batch = setup
    res = gd_train(LinearAttnModel.zeros(emb), batch, TrainConfig(), steps=1)
    assert np.all(res.model.W_KQ == 0.0)
    assert res.reports[0].fact_accuracy == 1.0
    assert res.losses[1] <= res.losses[0]


def test_step_one_signals_match_counting_oracle(vocab, setup):
    # At zero init: f = 0, beta = e_y - 1/N, sigma = 1/T. Each signal entry is then
    # eta/(n T) * sum over examples of beta_k times how often the token occupies that slot.
    emb, batch = setup
    eta, N, T, n = 1.0, vocab.size, 8, len(batch)
    M, Mp = np.zeros((N, N)), np.zeros((N, N))
    for seq, y in zip(batch.sequences, batch.y):
        beta = -np.full(N, 1 / N)
        beta[y] += 1
        z = seq.tokens
        counts = np.bincount(z, minlength=N)
        prev = np.bincount([z[i - 1] for i in range(1, T - 1)], minlength=N)
        M += np.outer(beta, counts)
        Mp += np.outer(beta, prev)
    M, Mp = M * eta / (n * T), Mp * eta / (n * T)
    rep = gd_train(LinearAttnModel.zeros(emb), batch, TrainConfig(eta1=eta), steps=1).reports[0]
    np.testing.assert_allclose(rep.M_phi, M, atol=1e-15)
    np.testing.assert_allclose(rep.M_phi_prime, Mp, atol=1e-15)


def test_step_one_spurious_trigger_signal_ordering(vocab, setup):
    # phi'(q) sits in every induction example and in no factual one, so each fact row
    # gets exactly -n_I / (N n T) there, below the (positive) average noise entry.
    emb, batch = setup
    rep = gd_train(LinearAttnModel.zeros(emb), batch, TrainConfig(), steps=1).reports[0]
    answers = [vocab.answer_of(s) for s in vocab.subjects]
    trig = rep.M_phi_prime[answers, vocab.trigger].mean()
    noise = rep.M_phi[np.ix_(answers, list(vocab.noise))].mean()
    N, n = vocab.size, len(batch)
    np.testing.assert_allclose(rep.M_phi_prime[answers, vocab.trigger], -vocab.n_noise / (N * n * 8), rtol=1e-12)
    assert trig < 0 < noise


def test_measure_signals_on_solver(vocab, solver):
    rep = measure_signals(LinearAttnModel.from_solver(solver), vocab)
    for s in vocab.subjects:
        assert rep.M_phi[vocab.answer_of(s), s] == SOLVER_CONSTS.C4
    for k in vocab.noise:
        assert rep.M_phi[k, k] == SOLVER_CONSTS.C3
    assert rep.fact_accuracy == 1.0


def test_measure_signals_zero_model(vocab, setup):
    emb, batch = setup
    rep = measure_signals(LinearAttnModel.zeros(emb), vocab, batch)
    assert np.all(rep.M_phi == 0) and np.all(rep.M_phi_prime == 0)
    assert rep.focus.shape == (len(batch),)
    assert all(v == 0.0 for v in rep.gamma_by_type.values())


def test_two_steps_loss_and_report(setup):
    emb, batch = setup
    res = gd_train(LinearAttnModel.zeros(emb), batch, TrainConfig(1.0, 50.0), steps=2)
    assert all(np.isfinite(res.losses))
    assert res.losses[0] >= res.losses[1] >= res.losses[2]
    assert np.any(res.model.W_KQ != 0.0)
    doc = json.loads(res.to_json())
    assert len(doc["steps"]) == 2 and len(doc["losses"]) == 3


def test_training_is_deterministic(setup):
    emb, batch = setup
    a = gd_train(LinearAttnModel.zeros(emb), batch, TrainConfig(), steps=2)
    b = gd_train(LinearAttnModel.zeros(emb), batch, TrainConfig(), steps=2)
    assert np.array_equal(a.model.W_KQ, b.model.W_KQ) and a.to_json() == b.to_json()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected(setup):
    emb, batch = setup
    with pytest.raises(TrainingDivergence, match="non-finite"):
        gd_train(_random_model(emb, make_rng(0), 1e200), batch, TrainConfig(1e200, 1e200), steps=1)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(eta1=0.0)
    assert TrainConfig(2.0, 3.0).eta(1) == 2.0 and TrainConfig(2.0, 3.0).eta(2) == 3.0
