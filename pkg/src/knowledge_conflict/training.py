"""Second-layer training dynamics over an idealised first layer.

The model is a one-layer attention head read out through a frozen unembedding::

    f(X) = W_lin^T W_OV X sigma,   sigma = softmax(X^T W_KQ x_T)   (softmax mode)
                                   sigma = X^T W_KQ x_T            (linear mode)

Inputs come from a first layer that copies the previous token: column i of X is
phi(z_i) + phi'(z_{i-1}), except the first column (phi(z_1)) and the last
(phi(q)). Embeddings phi, phi' and unembeddings mu are mutually orthonormal.

Updates apply the closed-form negative gradients

    -dL/dW_OV = W_lin (e_y - softmax(f)) (X sigma)^T
    -dL/dW_KQ = X [(W_lin^T W_OV X)^T (e_y - softmax(f))] x_T^T

in either mode. They are the exact gradients of the cross-entropy only in
linear mode; in softmax mode they drop the attention Jacobian.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .model import TwoLayerModel
from .numerics import NumericError, frozen, log_softmax, orthonormal_basis, softmax
from .tasks import Kind, TaskError, VocabSpec


class Attention(str, enum.Enum):
    SOFTMAX = "softmax"
    LINEAR = "linear"


@dataclass(frozen=True)
class TrainConfig:
    eta1: float = 1.0
    eta2: float = 50.0
    attention: Attention = Attention.SOFTMAX

    def __post_init__(self):
        if not (self.eta1 > 0 and self.eta2 > 0):
            raise ValueError("learning rates must be positive")
        object.__setattr__(self, "attention", Attention(self.attention))

    def eta(self, step: int) -> float:
        return self.eta1 if step == 1 else self.eta2


@dataclass(frozen=True, eq=False)
class Embeddings:
    phi: np.ndarray  # d x N
    phi_prime: np.ndarray  # d x N
    mu: np.ndarray  # d x N


def strict_embeddings(vocab: VocabSpec) -> Embeddings:
    """phi, phi', mu as three disjoint blocks of the standard basis of R^{3N}."""
    N = vocab.size
    E = orthonormal_basis(3 * N, 3 * N)
    return Embeddings(frozen(E[:, :N]), frozen(E[:, N : 2 * N]), frozen(E[:, 2 * N :]))


@dataclass(frozen=True, eq=False)
class LinearAttnModel:
    W_KQ: np.ndarray
    W_OV: np.ndarray
    emb: Embeddings

    @property
    def W_lin(self) -> np.ndarray:
        return self.emb.mu

    @classmethod
    def zeros(cls, emb: Embeddings) -> "LinearAttnModel":
        d = emb.phi.shape[0]
        return cls(frozen(np.zeros((d, d))), frozen(np.zeros((d, d))), emb)

    @classmethod
    def from_solver(cls, model: TwoLayerModel) -> "LinearAttnModel":
        """Second layer of a constructed two-layer model, with its embeddings."""
        emb = Embeddings(model.phi, frozen(model.phi_prime), model.W_lin)
        return cls(model.W_KQ[1], model.W_OV[1], emb)


@dataclass(frozen=True, eq=False)
class PreparedBatch:
    X: np.ndarray  # n x d x T
    y: np.ndarray  # n labels
    kinds: tuple
    critical: np.ndarray  # n positions the head should attend to (0-based)
    sequences: tuple
    vocab: VocabSpec

    def __len__(self):
        return len(self.y)


def prepare_inputs(vocab: VocabSpec, sequences, emb: Embeddings) -> PreparedBatch:
    sequences = tuple(sequences)
    if not sequences:
        raise TaskError("empty batch")
    T = sequences[0].T
    xs, ys, crit = [], [], []
    for seq in sequences:
        if seq.T != T:
            raise TaskError(f"mixed sequence lengths {T} and {seq.T}")
        if seq.kind is Kind.CONFLICT:
            raise TaskError("conflict sequences have no single training label")
        z = np.asarray(seq.tokens)
        if z.min() < 0 or z.max() >= vocab.size or z[-1] != vocab.trigger:
            raise TaskError(f"sequence {seq.tokens} does not belong to this vocabulary")
        X = emb.phi[:, z].copy()
        X[:, 1:-1] += emb.phi_prime[:, z[:-2]]
        xs.append(X)
        ys.append(seq.target)
        crit.append(seq.subject_pos if seq.kind is Kind.FACTUAL else seq.trigger_pos + 1)
    return PreparedBatch(
        frozen(np.stack(xs)),
        np.asarray(ys),
        tuple(s.kind for s in sequences),
        np.asarray(crit),
        sequences,
        vocab,
    )


def forward_linear(model: LinearAttnModel, X: np.ndarray, config: TrainConfig = TrainConfig()):
    """Returns (logits f, attention coefficients sigma)."""
    scores = X.T @ (model.W_KQ @ X[:, -1])
    sigma = softmax(scores) if config.attention is Attention.SOFTMAX else scores
    return model.W_lin.T @ (model.W_OV @ (X @ sigma)), sigma


def cross_entropy(model: LinearAttnModel, X, y: int, config: TrainConfig = TrainConfig()) -> float:
    f, _ = forward_linear(model, X, config)
    return float(-log_softmax(f)[y])


def batch_loss(model: LinearAttnModel, batch: PreparedBatch, config: TrainConfig = TrainConfig()) -> float:
    return float(np.mean([cross_entropy(model, X, y, config) for X, y in zip(batch.X, batch.y)]))


def gradients(model: LinearAttnModel, X, y: int, config: TrainConfig = TrainConfig()):
    """Negative gradients (-dL/dW_OV, -dL/dW_KQ) from the closed-form expressions."""
    f, sigma = forward_linear(model, X, config)
    beta = -softmax(f)
    beta[y] += 1.0
    neg_ov = np.outer(model.W_lin @ beta, X @ sigma)
    gamma = (model.W_lin.T @ model.W_OV @ X).T @ beta
    neg_kq = np.outer(X @ gamma, X[:, -1])
    return neg_ov, neg_kq


# Signals -------------------------------------------------------------------


@dataclass(eq=False)
class AssocSignalReport:
    """Associative-memory readout of W_OV and where the head attends.

    ``M_phi[k, t] = mu(k)^T W_OV phi(t)`` and likewise ``M_phi_prime`` for phi'.
    """

    M_phi: np.ndarray
    M_phi_prime: np.ndarray
    fact_correct: dict  # subject -> argmax_k M_phi[k, s] == G*(s)
    focus: Optional[np.ndarray] = None  # per sequence: attention argmax is the critical position
    gamma_by_type: dict = field(default_factory=dict)
    loss: Optional[float] = None

    @property
    def fact_accuracy(self) -> float:
        return float(np.mean(list(self.fact_correct.values())))

    @property
    def focus_fraction(self) -> Optional[float]:
        return None if self.focus is None else float(np.mean(self.focus))

    def to_dict(self) -> dict:
        return {
            "M_phi": self.M_phi.tolist(),
            "M_phi_prime": self.M_phi_prime.tolist(),
            "fact_correct": {str(s): bool(v) for s, v in self.fact_correct.items()},
            "fact_accuracy": self.fact_accuracy,
            "focus": None if self.focus is None else [bool(v) for v in self.focus],
            "focus_fraction": self.focus_fraction,
            "gamma_by_type": self.gamma_by_type,
            "loss": self.loss,
        }


def _position_types(seq, T: int) -> list:
    """Label each position of a training sequence for the gamma audit."""
    labels = []
    for k in range(T):
        if k == T - 1:
            label = "last"
        elif seq.kind is Kind.FACTUAL:
            i = seq.subject_pos
            label = "subject" if k == i else "after_subject" if k == i + 1 else "first" if k == 0 else "noise"
        else:
            j = seq.trigger_pos
            label = (
                "answer" if k == j + 1
                else "first_trigger" if k == j
                else "after_answer" if k == j + 2
                else "first" if k == 0
                else "noise"
            )
        labels.append(f"{seq.kind.value}/{label}")
    return labels


def measure_signals(
    model: LinearAttnModel,
    vocab: VocabSpec,
    batch: Optional[PreparedBatch] = None,
    config: TrainConfig = TrainConfig(),
) -> AssocSignalReport:
    mu, W = model.W_lin, model.W_OV
    M_phi = mu.T @ W @ model.emb.phi
    M_phi_prime = mu.T @ W @ model.emb.phi_prime
    fact_correct = {s: int(np.argmax(M_phi[:, s])) == vocab.answer_of(s) for s in vocab.subjects}
    report = AssocSignalReport(M_phi, M_phi_prime, fact_correct)
    if batch is None:
        return report
    focus, sums, counts = [], {}, {}
    for X, y, crit, seq in zip(batch.X, batch.y, batch.critical, batch.sequences):
        f, sigma = forward_linear(model, X, config)
        focus.append(int(np.argmax(sigma)) == int(crit))
        beta = -softmax(f)
        beta[y] += 1.0
        gamma = (mu.T @ W @ X).T @ beta
        for label, g in zip(_position_types(seq, X.shape[1]), gamma):
            sums[label] = sums.get(label, 0.0) + float(g)
            counts[label] = counts.get(label, 0) + 1
    report.focus = np.asarray(focus)
    report.gamma_by_type = {k: sums[k] / counts[k] for k in sorted(sums)}
    report.loss = batch_loss(model, batch, config)
    return report


# Training ------------------------------------------------------------------


class TrainingDivergence(NumericError):
    pass


@dataclass(eq=False)
class TrainResult:
    model: LinearAttnModel
    reports: list  # one AssocSignalReport per completed step
    losses: list  # loss before training, then after each step
    W_KQ_history: list = field(default_factory=list)  # W_KQ after each step

    def to_dict(self) -> dict:
        return {"losses": self.losses, "steps": [r.to_dict() for r in self.reports]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def gd_train(
    model: LinearAttnModel,
    batch: PreparedBatch,
    config: TrainConfig = TrainConfig(),
    steps: int = 2,
) -> TrainResult:
    """Full-batch gradient steps W <- W + (eta / n) sum(-grad W), summed in batch order."""
    n = len(batch)
    losses = [batch_loss(model, batch, config)]
    reports, history = [], []
    for step in range(1, steps + 1):
        acc_ov = np.zeros_like(model.W_OV)
        acc_kq = np.zeros_like(model.W_KQ)
        for X, y in zip(batch.X, batch.y):
            g_ov, g_kq = gradients(model, X, int(y), config)
            acc_ov += g_ov
            acc_kq += g_kq
        eta = config.eta(step)
        W_OV = model.W_OV + (eta / n) * acc_ov
        W_KQ = model.W_KQ + (eta / n) * acc_kq
        for name, W in (("W_OV", W_OV), ("W_KQ", W_KQ)):
            if not np.all(np.isfinite(W)):
                bad = int(np.count_nonzero(~np.isfinite(W)))
                raise TrainingDivergence(
                    f"step {step}: {bad} non-finite entries in {name} (eta={eta}, "
                    f"loss before step {losses[-1]:.6g})"
                )
        model = replace(model, W_OV=frozen(W_OV), W_KQ=frozen(W_KQ))
        history.append(model.W_KQ)
        report = measure_signals(model, batch.vocab, batch, config)
        reports.append(report)
        losses.append(report.loss)
    return TrainResult(model, reports, losses, history)
