"""Two-layer attention-only transformer with one head per layer and per-head hooks.

Columns are token positions throughout: ``X`` is d x t, attention scores are
``S[k, q] = x_k^T W_KQ x_q`` (key k, query q) and the softmax runs down each
column over the causal prefix ``k <= q``. A head's output at every position is
passed through the hooks targeting it before being added to the residual
stream.

Orthonormal layout (d >= 2N + 2T + 1), before a random coordinate permutation::

    phi(z)   token embeddings            N columns
    p_t      positions                   T columns
    phi'(z)  W_OV1 phi(z)                N columns
    p'_t     W_OV1 p_t                   T columns
    mu(q)    unembedding of the trigger  1 column
    mu(z) = phi(z) for z != q

Sharing mu with phi is exact for every logit: at the last position the only
phi-component of the residual stream is phi(q), and mu(z) for z != q is
orthogonal to it. W_OV1 is the permutation swapping the phi/phi' and p/p'
blocks, so it is orthogonal and phi', p' are exactly orthonormal to the rest.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence as Seq

import numpy as np

from .numerics import (
    CapacityError,
    frozen,
    make_rng,
    orthonormal_basis,
    random_orthogonal,
    sample_unit_sphere,
    softmax,
    softmax_masked,
)
from .tasks import VocabSpec

MODEL_FORMAT = "knowledge-conflict/two-layer-model"


class VocabularyError(ValueError):
    pass


class HookError(ValueError):
    pass


class Mode(str, enum.Enum):
    ORTHONORMAL = "orthonormal"
    SPHERE = "sphere"


@dataclass(frozen=True)
class ConstructionConsts:
    C: float = 20.0
    C1: float = 8.0
    C2: float = 8.0
    C3: float = 10.0
    C4: float = 10.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


INDUCTION_DOMINANT = ConstructionConsts(C=20.0, C1=4.0, C2=1.0, C3=10.0, C4=10.0)


@dataclass(frozen=True, order=True)
class HeadRef:
    layer: int

    def __post_init__(self):
        if self.layer not in (1, 2):
            raise HookError(f"toy model has heads at layers 1 and 2, got {self.layer}")

    def __str__(self):
        return f"L{self.layer}"


LAYER1 = HeadRef(1)
LAYER2 = HeadRef(2)
ALL_HEADS = (LAYER1, LAYER2)


# Hooks ---------------------------------------------------------------------


@dataclass(frozen=True)
class Observe:
    target: HeadRef

    def apply(self, h):
        return h


@dataclass(frozen=True)
class ScaleAdd:
    """H <- H + alpha * H. Additive convention: alpha = -1 knocks the head out,
    and a multiplicative rescale by m is ScaleAdd(m - 1)."""

    target: HeadRef
    alpha: float

    def apply(self, h):
        return h + self.alpha * h


@dataclass(frozen=True, eq=False)
class AddExternal:
    """H <- H + beta * payload, payload being per-position vectors (d x t)."""

    target: HeadRef
    payload: np.ndarray = field(repr=False)
    beta: float = 1.0

    def apply(self, h):
        payload = np.asarray(self.payload)
        if payload.shape != h.shape:
            raise HookError(
                f"external payload for {self.target} has shape {payload.shape}, head output is {h.shape}"
            )
        return h + self.beta * payload


@dataclass(frozen=True)
class Zero:
    target: HeadRef

    def apply(self, h):
        return np.zeros_like(h)


# Model ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TwoLayerModel:
    vocab: VocabSpec
    T: int
    d: int
    mode: Mode
    consts: ConstructionConsts
    phi: np.ndarray = field(repr=False)  # d x N
    pos: np.ndarray = field(repr=False)  # d x T
    W_KQ: tuple = field(repr=False)  # (layer 1, layer 2), each d x d
    W_OV: tuple = field(repr=False)
    W_lin: np.ndarray = field(repr=False)  # d x N, column z is mu(z)
    seed: Optional[int] = None

    @property
    def N(self) -> int:
        return self.vocab.size

    @property
    def phi_prime(self) -> np.ndarray:
        return self.W_OV[0] @ self.phi

    @property
    def pos_prime(self) -> np.ndarray:
        return self.W_OV[0] @ self.pos

    @property
    def heads(self) -> tuple:
        return ALL_HEADS


def required_dim(vocab: VocabSpec, T: int) -> int:
    return 2 * vocab.size + 2 * T + 1


def build_perfect_solver(
    vocab: VocabSpec,
    T: int,
    d: int,
    consts: ConstructionConsts = ConstructionConsts(),
    rng=0,
    mode=Mode.ORTHONORMAL,
) -> TwoLayerModel:
    """Hand-built weights that solve factual recall and induction.

    ``rng`` is a Generator or an integer seed (recorded on the model for replay).
    """
    mode = Mode(mode)
    seed = int(rng) if isinstance(rng, (int, np.integer)) else None
    if seed is not None:
        rng = make_rng(seed)
    N = vocab.size
    q = vocab.trigger

    if mode is Mode.ORTHONORMAL:
        need = required_dim(vocab, T)
        if d < need:
            raise CapacityError(
                f"orthonormal mode with N={N}, T={T} needs d >= {need}, got d={d}", required_d=need
            )
        E = orthonormal_basis(d, d)[:, rng.permutation(d)]
        phi = E[:, :N]
        pos = E[:, N : N + T]
        phi_p = E[:, N + T : 2 * N + T]
        pos_p = E[:, 2 * N + T : 2 * N + 2 * T]
        W_lin = phi.copy()
        W_lin[:, q] = E[:, 2 * N + 2 * T]
        # swap phi <-> phi', p <-> p', identity on the remaining coordinates
        src = np.hstack([phi, pos, phi_p, pos_p])
        dst = np.hstack([phi_p, pos_p, phi, pos])
        rest = E[:, 2 * N + 2 * T :]
        W_OV1 = dst @ src.T + rest @ rest.T
    else:
        phi = sample_unit_sphere(d, N, rng)
        pos = sample_unit_sphere(d, T, rng)
        W_lin = sample_unit_sphere(d, N, rng)
        W_OV1 = random_orthogonal(d, rng)

    c = consts
    W_KQ1 = c.C * pos[:, :-1] @ pos[:, 1:].T
    phi_q = phi[:, q]
    subjects = list(vocab.subjects)
    noise = list(vocab.noise)
    answers = [vocab.answer_of(s) for s in subjects]
    W_KQ2 = c.C1 * np.outer(W_OV1 @ phi_q, phi_q) + c.C2 * np.outer(phi[:, subjects].sum(axis=1), phi_q)
    W_OV2 = c.C3 * W_lin[:, noise] @ phi[:, noise].T + c.C4 * W_lin[:, answers] @ phi[:, subjects].T

    return TwoLayerModel(
        vocab=vocab,
        T=T,
        d=d,
        mode=mode,
        consts=consts,
        phi=frozen(phi),
        pos=frozen(pos),
        W_KQ=(frozen(W_KQ1), frozen(W_KQ2)),
        W_OV=(frozen(W_OV1), frozen(W_OV2)),
        W_lin=frozen(W_lin),
        seed=seed,
    )


# Forward -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    logits: np.ndarray  # length N, last position
    head_outputs: dict  # layer -> d x t, after hooks
    attention: dict  # layer -> t x t, row q is the distribution of query q over keys
    residuals: tuple  # X^(1), X^(2), X^(3)


def _check_tokens(model: TwoLayerModel, tokens) -> np.ndarray:
    z = np.asarray(tokens)
    if z.ndim != 1 or z.size == 0:
        raise VocabularyError("tokens must be a non-empty 1-d sequence")
    if z.size > model.T:
        raise VocabularyError(f"{z.size} tokens exceed the model's {model.T} positions")
    if not np.issubdtype(z.dtype, np.integer) or z.min() < 0 or z.max() >= model.N:
        raise VocabularyError(f"token ids must be integers in [0, {model.N}), got {list(tokens)}")
    return z


def forward(model: TwoLayerModel, tokens, hooks: Seq = ()) -> ForwardTrace:
    z = _check_tokens(model, tokens)
    for hook in hooks:
        if hook.target not in model.heads:
            raise HookError(f"hook targets unknown head {hook.target}")
    t = z.size
    causal = np.triu(np.ones((t, t), dtype=bool))  # causal[k, q]: key k visible to query q
    X = model.phi[:, z] + model.pos[:, :t]
    residuals = [X]
    head_outputs, attention = {}, {}
    for layer in (1, 2):
        scores = X.T @ (model.W_KQ[layer - 1] @ X)
        A = softmax_masked(scores, causal, axis=0)
        H = model.W_OV[layer - 1] @ (X @ A)
        for hook in hooks:
            if hook.target.layer == layer:
                H = hook.apply(H)
        head_outputs[layer] = frozen(H)
        attention[layer] = frozen(A.T)
        X = X + H
        residuals.append(X)
    logits = model.W_lin.T @ X[:, -1]
    return ForwardTrace(frozen(logits), head_outputs, attention, tuple(frozen(r) for r in residuals))


class Evaluation(NamedTuple):
    probs: np.ndarray
    prediction: int
    lookup: dict


def evaluate(model: TwoLayerModel, tokens, hooks: Seq = ()) -> Evaluation:
    """Next-token distribution at the last position; argmax ties go to the lowest id."""
    logits = forward(model, tokens, hooks).logits
    return distribution(logits)


def distribution(logits) -> Evaluation:
    probs = softmax(logits)
    return Evaluation(probs, int(np.argmax(probs)), {k: float(p) for k, p in enumerate(probs)})


class Winner(str, enum.Enum):
    FACTUAL = "Factual"
    INDUCTION = "Induction"
    BOUNDARY = "Boundary"


def conflict_winner_closed_form(consts: ConstructionConsts, tol: float = 0.1) -> Winner:
    """Compare exp(C1) C3 (induction) against exp(C2) C4 (factual).

    Relative gaps below ``tol`` are reported as Boundary.
    """
    ind = math.exp(consts.C1) * consts.C3
    fact = math.exp(consts.C2) * consts.C4
    top = max(ind, fact)
    if top == 0.0 or abs(ind - fact) / top < tol:
        return Winner.BOUNDARY
    return Winner.FACTUAL if ind < fact else Winner.INDUCTION


def conflict_logits_closed_form(consts: ConstructionConsts, T: int) -> tuple:
    """(contextual, parametric) last-position logits on a conflict input."""
    z = math.exp(consts.C1) + math.exp(consts.C2) + (T - 2)
    return consts.C3 * math.exp(consts.C1) / z, consts.C4 * math.exp(consts.C2) / z


# Persistence ---------------------------------------------------------------


def _matrix_to_text(a: np.ndarray) -> list:
    return [[repr(float(v)) for v in row] for row in np.asarray(a)]


def _matrix_from_text(rows) -> np.ndarray:
    return frozen(np.array([[float(v) for v in row] for row in rows], dtype=np.float64))


def model_to_dict(model: TwoLayerModel, include_weights: bool = False) -> dict:
    out = {
        "format": MODEL_FORMAT,
        "version": 1,
        "d": model.d,
        "T": model.T,
        "mode": model.mode.value,
        "consts": asdict(model.consts),
        "seed": model.seed,
        "vocab": model.vocab.to_dict(),
    }
    if include_weights:
        out["weights"] = {
            "phi": _matrix_to_text(model.phi),
            "pos": _matrix_to_text(model.pos),
            "W_KQ1": _matrix_to_text(model.W_KQ[0]),
            "W_KQ2": _matrix_to_text(model.W_KQ[1]),
            "W_OV1": _matrix_to_text(model.W_OV[0]),
            "W_OV2": _matrix_to_text(model.W_OV[1]),
            "W_lin": _matrix_to_text(model.W_lin),
        }
    return out


def model_from_dict(data: dict) -> TwoLayerModel:
    if data.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} document")
    vocab = VocabSpec.from_dict(data["vocab"])
    consts = ConstructionConsts(**data["consts"])
    mode = Mode(data["mode"])
    if "weights" in data:
        w = {k: _matrix_from_text(v) for k, v in data["weights"].items()}
        return TwoLayerModel(
            vocab=vocab,
            T=int(data["T"]),
            d=int(data["d"]),
            mode=mode,
            consts=consts,
            phi=w["phi"],
            pos=w["pos"],
            W_KQ=(w["W_KQ1"], w["W_KQ2"]),
            W_OV=(w["W_OV1"], w["W_OV2"]),
            W_lin=w["W_lin"],
            seed=data.get("seed"),
        )
    if data.get("seed") is None:
        raise ValueError("model document has neither weights nor a seed to rebuild from")
    return build_perfect_solver(vocab, int(data["T"]), int(data["d"]), consts, int(data["seed"]), mode)


def save_model(model: TwoLayerModel, path, include_weights: bool = False) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model_to_dict(model, include_weights), sort_keys=True) + "\n")
    return path


def load_model(path) -> TwoLayerModel:
    return model_from_dict(json.loads(Path(path).read_text()))
