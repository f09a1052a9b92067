"""Partitioned vocabulary and the factual / induction / conflict sequence generators.

Token id layout (contiguous, disjoint)::

    subjects S   [0, n_subjects)
    answers  A   [n_subjects, 2 n_subjects)
    trigger  q   2 n_subjects
    noise    N   [2 n_subjects + 1, 2 n_subjects + 1 + n_noise)

Positions stored on :class:`Sequence` are 0-based python indices. The JSON-lines
export writes them 1-based.

Sampling order (fixes golden values for a seed):

* factual: subject position, subject, then the T-2 noise tokens (without
  replacement) filled into the remaining slots left to right.
* induction: trigger position j in [2, T-2] (1-based), answer z_{j+1} from N,
  then the remaining T-3 slots from N minus the answer, without replacement.
* conflict: trigger position, answer, subject position from [1, T-1] minus
  {j, j+1}, subject, then T-4 noise tokens from N minus the answer.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np


class TaskError(ValueError):
    pass


class Kind(str, enum.Enum):
    FACTUAL = "Factual"
    INDUCTION = "Induction"
    CONFLICT = "Conflict"


@dataclass(frozen=True)
class VocabSpec:
    n_subjects: int
    n_noise: int
    ground_truth: tuple  # ground_truth[s] = answer id for subject id s

    def __post_init__(self):
        if self.n_subjects < 1 or self.n_noise < 1:
            raise TaskError(
                f"vocabulary needs n_subjects >= 1 and n_noise >= 1, "
                f"got {self.n_subjects}, {self.n_noise}"
            )
        gt = tuple(int(a) for a in self.ground_truth)
        if len(gt) != self.n_subjects or sorted(gt) != list(self.answers):
            raise TaskError("ground_truth must be a bijection from subjects onto answers")
        object.__setattr__(self, "ground_truth", gt)

    @property
    def size(self) -> int:
        return 2 * self.n_subjects + 1 + self.n_noise

    @property
    def subjects(self) -> range:
        return range(0, self.n_subjects)

    @property
    def answers(self) -> range:
        return range(self.n_subjects, 2 * self.n_subjects)

    @property
    def trigger(self) -> int:
        return 2 * self.n_subjects

    @property
    def noise(self) -> range:
        start = 2 * self.n_subjects + 1
        return range(start, start + self.n_noise)

    def answer_of(self, subject: int) -> int:
        return self.ground_truth[subject]

    def partition_of(self, token: int) -> str:
        if token in self.subjects:
            return "S"
        if token in self.answers:
            return "A"
        if token == self.trigger:
            return "q"
        if token in self.noise:
            return "N"
        raise TaskError(f"token id {token} outside vocabulary of size {self.size}")

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "n_noise": self.n_noise,
            "ground_truth": list(self.ground_truth),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VocabSpec":
        return cls(int(d["n_subjects"]), int(d["n_noise"]), tuple(d["ground_truth"]))


def build_vocab(n_subjects: int, n_noise: int, rng: np.random.Generator) -> VocabSpec:
    if n_subjects < 1 or n_noise < 1:
        raise TaskError(
            f"vocabulary needs n_subjects >= 1 and n_noise >= 1, got {n_subjects}, {n_noise}"
        )
    perm = rng.permutation(n_subjects)
    return VocabSpec(n_subjects, n_noise, tuple(int(n_subjects + p) for p in perm))


@dataclass(frozen=True)
class Sequence:
    kind: Kind
    tokens: tuple
    subject_pos: Optional[int] = None
    trigger_pos: Optional[int] = None
    parametric_answer: Optional[int] = None
    contextual_answer: Optional[int] = None

    @property
    def T(self) -> int:
        return len(self.tokens)

    @property
    def target(self) -> int:
        """Supervision label: the held-out token at position T+1."""
        if self.kind is Kind.FACTUAL:
            return self.parametric_answer
        if self.kind is Kind.INDUCTION:
            return self.contextual_answer
        raise TaskError("conflict sequences carry two labels; pick one explicitly")

    def check(self, vocab: VocabSpec) -> None:
        """Raise :class:`TaskError` if any structural invariant is violated."""
        z, T = self.tokens, self.T
        if z[-1] != vocab.trigger:
            raise TaskError("last token must be the trigger")
        noise = [t for t in z if t in vocab.noise]
        if len(set(noise)) != len(noise):
            raise TaskError("noise tokens repeat within a sequence")
        subjects = [k for k, t in enumerate(z) if t in vocab.subjects]
        triggers = [k for k, t in enumerate(z[:-1]) if t == vocab.trigger]
        if any(t in vocab.answers for t in z):
            raise TaskError("answer tokens never appear as inputs")
        if self.kind in (Kind.FACTUAL, Kind.CONFLICT):
            i = self.subject_pos
            if subjects != [i] or not 0 <= i <= T - 2:
                raise TaskError(f"bad subject placement {subjects} (subject_pos={i})")
            if self.parametric_answer != vocab.answer_of(z[i]):
                raise TaskError("parametric answer differs from G*(s)")
        if self.kind in (Kind.INDUCTION, Kind.CONFLICT):
            j = self.trigger_pos
            if triggers != [j] or not 1 <= j <= T - 3:
                raise TaskError(f"bad trigger placement {triggers} (trigger_pos={j})")
            if self.contextual_answer != z[j + 1] or z[j + 1] not in vocab.noise:
                raise TaskError("contextual answer must be the noise token after the trigger")
        if self.kind is Kind.FACTUAL and triggers:
            raise TaskError("factual sequences hold the trigger only at the end")
        if self.kind is Kind.INDUCTION and subjects:
            raise TaskError("induction sequences contain no subject")
        if self.kind is Kind.CONFLICT:
            if self.subject_pos in (self.trigger_pos, self.trigger_pos + 1):
                raise TaskError("subject collides with the trigger or its successor")
            if self.parametric_answer == self.contextual_answer:
                raise TaskError("conflict labels coincide")

    def to_record(self) -> dict:
        def one_based(k):
            return None if k is None else k + 1

        return {
            "kind": self.kind.value,
            "tokens": list(self.tokens),
            "subject_pos": one_based(self.subject_pos),
            "trigger_pos": one_based(self.trigger_pos),
            "parametric_answer": self.parametric_answer,
            "contextual_answer": self.contextual_answer,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Sequence":
        def zero_based(k):
            return None if k is None else int(k) - 1

        return cls(
            kind=Kind(rec["kind"]),
            tokens=tuple(int(t) for t in rec["tokens"]),
            subject_pos=zero_based(rec.get("subject_pos")),
            trigger_pos=zero_based(rec.get("trigger_pos")),
            parametric_answer=rec.get("parametric_answer"),
            contextual_answer=rec.get("contextual_answer"),
        )


def _check_lengths(vocab: VocabSpec, T: int) -> None:
    if T < 4:
        raise TaskError(f"sequence length must be >= 4 so the trigger slot [2, T-2] is nonempty, got {T}")
    if vocab.n_noise < T:
        raise TaskError(f"need at least T={T} distinct noise tokens, vocabulary has {vocab.n_noise}")


def _factual(vocab, T, rng, subject=None) -> Sequence:
    i = int(rng.integers(0, T - 1))
    s = int(rng.integers(0, vocab.n_subjects)) if subject is None else int(subject)
    noise = iter(rng.choice(np.asarray(vocab.noise), size=T - 2, replace=False).tolist())
    z = [s if k == i else next(noise) for k in range(T - 1)] + [vocab.trigger]
    return Sequence(Kind.FACTUAL, tuple(z), subject_pos=i, parametric_answer=vocab.answer_of(s))


def _induction(vocab, T, rng, answer=None) -> Sequence:
    j = int(rng.integers(1, T - 2))
    noise_ids = np.asarray(vocab.noise)
    b = int(noise_ids[rng.integers(0, vocab.n_noise)]) if answer is None else int(answer)
    rest = iter(rng.choice(noise_ids[noise_ids != b], size=T - 3, replace=False).tolist())
    z = []
    for k in range(T - 1):
        z.append(vocab.trigger if k == j else b if k == j + 1 else next(rest))
    z.append(vocab.trigger)
    return Sequence(Kind.INDUCTION, tuple(z), trigger_pos=j, contextual_answer=b)


def _conflict(vocab, T, rng) -> Sequence:
    j = int(rng.integers(1, T - 2))
    noise_ids = np.asarray(vocab.noise)
    b = int(noise_ids[rng.integers(0, vocab.n_noise)])
    slots = [k for k in range(T - 1) if k not in (j, j + 1)]
    i = slots[int(rng.integers(0, len(slots)))]
    s = int(rng.integers(0, vocab.n_subjects))
    rest = iter(rng.choice(noise_ids[noise_ids != b], size=T - 4, replace=False).tolist())
    z = []
    for k in range(T - 1):
        z.append(vocab.trigger if k == j else b if k == j + 1 else s if k == i else next(rest))
    z.append(vocab.trigger)
    return Sequence(
        Kind.CONFLICT,
        tuple(z),
        subject_pos=i,
        trigger_pos=j,
        parametric_answer=vocab.answer_of(s),
        contextual_answer=b,
    )


_GENERATORS = {Kind.FACTUAL: _factual, Kind.INDUCTION: _induction, Kind.CONFLICT: _conflict}


def generate_sequence(vocab: VocabSpec, kind, T: int, rng: np.random.Generator) -> Sequence:
    _check_lengths(vocab, T)
    return _GENERATORS[Kind(kind)](vocab, T, rng)


def generate_batch(vocab: VocabSpec, kind, T: int, count: int, rng: np.random.Generator) -> list:
    _check_lengths(vocab, T)
    gen = _GENERATORS[Kind(kind)]
    return [gen(vocab, T, rng) for _ in range(count)]


def training_dataset(vocab: VocabSpec, T: int, rng: np.random.Generator) -> list:
    """Duplicate-free training set: every fact once, every noise token once as induction answer.

    Returns |S| factual sequences followed by n_noise induction sequences.
    """
    _check_lengths(vocab, T)
    facts = [_factual(vocab, T, rng, subject=s) for s in vocab.subjects]
    inductions = [_induction(vocab, T, rng, answer=b) for b in vocab.noise]
    return facts + inductions


def conflict_with_clean_twin(vocab: VocabSpec, T: int, rng: np.random.Generator):
    """A conflict sequence plus a clean factual sequence on the same subject."""
    _check_lengths(vocab, T)
    conflict = _conflict(vocab, T, rng)
    clean = _factual(vocab, T, rng, subject=conflict.tokens[conflict.subject_pos])
    return conflict, clean


def write_jsonl(sequences: Iterable[Sequence], path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for seq in sequences:
            fh.write(json.dumps(seq.to_record(), sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> list:
    with Path(path).open(encoding="utf-8") as fh:
        return [Sequence.from_record(json.loads(line)) for line in fh if line.strip()]
