"""Head scoring, consistency filtering, top-K selection and the two inference modes.

Scaling is additive everywhere: a coefficient ``a`` turns a head output H into
``H + a * H``. Knocking a head out is ``a = -1``; a multiplicative rescale by
``m`` is ``a = m - 1``.

Single-pass inference scales the live head output. Dual-run inference first
runs the model untouched, caches the selected heads' outputs, then reruns it
adding ``beta * cached``. When an upstream head is edited, downstream heads in
the second run produce different outputs than in the first, so subtracting the
cached activation is not the same as zeroing.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .model import AddExternal, HeadRef, ScaleAdd, TwoLayerModel, distribution, evaluate, forward
from .tasks import VocabSpec, conflict_with_clean_twin

log = logging.getLogger(__name__)

CLEAN_FACTUAL = "CleanFactual"
CONFLICT = "Conflict"

# Grids for the toy suite and the presets used on real language models.
TOY_ALPHA_PLUS = (1.0, 2.0)
TOY_ALPHA_MINUS = (-0.5, -1.0)
LM_ALPHA_PLUS = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
LM_ALPHA_MINUS = (0.0, -1.0, -2.0, -3.0)
LM_K_SMALL = 5
LM_K_LARGE = 10


@dataclass(frozen=True)
class SuiteEntry:
    conflict_type: str
    tokens: tuple
    target: int


@dataclass(frozen=True)
class ConflictSuite:
    entries: tuple
    conflict_types: tuple

    def __post_init__(self):
        present = {e.conflict_type for e in self.entries}
        missing = [t for t in self.conflict_types if t not in present]
        if missing:
            raise ValueError(f"conflict types without entries: {missing}")
        unknown = present - set(self.conflict_types)
        if unknown:
            raise ValueError(f"entries with undeclared conflict types: {sorted(unknown)}")


def toy_suite(vocab: VocabSpec, T: int, n_samples: int, rng) -> ConflictSuite:
    """``n_samples`` samples, each a clean factual prompt and a conflict prompt on one fact.

    Every target is the parametric answer.
    """
    if n_samples < 1:
        raise ValueError("suite needs at least one sample")
    entries = []
    for _ in range(n_samples):
        conflict, clean = conflict_with_clean_twin(vocab, T, rng)
        entries.append(SuiteEntry(CLEAN_FACTUAL, clean.tokens, clean.parametric_answer))
        entries.append(SuiteEntry(CONFLICT, conflict.tokens, conflict.parametric_answer))
    return ConflictSuite(tuple(entries), (CLEAN_FACTUAL, CONFLICT))


def intervention_effect(model: TwoLayerModel, tokens, y: int, head: HeadRef, alpha: float) -> float:
    """P(y | head scaled by H + alpha H) - P(y)."""
    base = evaluate(model, tokens).probs[y]
    moved = evaluate(model, tokens, [ScaleAdd(head, alpha)]).probs[y]
    return float(moved - base)


@dataclass
class ScoreTable:
    conflict_types: tuple
    heads: tuple
    S_plus: dict = field(default_factory=dict)  # (type, head) -> score
    S_minus: dict = field(default_factory=dict)

    def __post_init__(self):
        for table in (self.S_plus, self.S_minus):
            for t in self.conflict_types:
                for h in self.heads:
                    table.setdefault((t, h), 0.0)

    def aggregated(self, sign: str) -> dict:
        table = self.S_plus if sign == "+" else self.S_minus
        return {h: sum(table[(t, h)] for t in self.conflict_types) for h in self.heads}

    def to_dict(self) -> dict:
        def dump(table):
            return {t: {str(h.layer): table[(t, h)] for h in self.heads} for t in self.conflict_types}

        return {
            "conflict_types": list(self.conflict_types),
            "heads": [h.layer for h in self.heads],
            "S_plus": dump(self.S_plus),
            "S_minus": dump(self.S_minus),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreTable":
        heads = tuple(HeadRef(int(h)) for h in d["heads"])
        types = tuple(d["conflict_types"])

        def load(raw):
            return {(t, h): float(raw[t][str(h.layer)]) for t in types for h in heads}

        return cls(types, heads, load(d["S_plus"]), load(d["S_minus"]))


def record_head_scores(
    model: TwoLayerModel,
    suite: ConflictSuite,
    alpha_plus: Iterable[float] = TOY_ALPHA_PLUS,
    alpha_minus: Iterable[float] = TOY_ALPHA_MINUS,
    heads: Iterable[HeadRef] | None = None,
) -> ScoreTable:
    """Accumulate probability changes of each entry's target over every head and grid value."""
    alpha_plus, alpha_minus = tuple(alpha_plus), tuple(alpha_minus)
    if not alpha_plus or not alpha_minus:
        raise ValueError("both scaling grids must be non-empty")
    heads = tuple(model.heads if heads is None else heads)
    table = ScoreTable(suite.conflict_types, heads)
    for entry in suite.entries:
        base = evaluate(model, entry.tokens).probs[entry.target]
        for head in heads:
            for grid, scores in ((alpha_plus, table.S_plus), (alpha_minus, table.S_minus)):
                for alpha in grid:
                    p = evaluate(model, entry.tokens, [ScaleAdd(head, alpha)]).probs[entry.target]
                    scores[(entry.conflict_type, head)] += float(p - base)
    return table


@dataclass(frozen=True)
class HeadSets:
    H_plus: tuple
    H_minus: tuple

    def to_dict(self) -> dict:
        return {"H_plus": [h.layer for h in self.H_plus], "H_minus": [h.layer for h in self.H_minus]}

    @classmethod
    def from_dict(cls, d: dict) -> "HeadSets":
        return cls(tuple(HeadRef(int(h)) for h in d["H_plus"]), tuple(HeadRef(int(h)) for h in d["H_minus"]))


def filter_inconsistent_heads(table: ScoreTable, all_heads=None, tol: float = 0.0) -> HeadSets:
    """Drop a head from a sign's set if any conflict type scores it below ``-tol``."""
    heads = tuple(table.heads if all_heads is None else all_heads)

    def keep(scores):
        return tuple(h for h in heads if all(scores[(t, h)] >= -tol for t in table.conflict_types))

    return HeadSets(keep(table.S_plus), keep(table.S_minus))


@dataclass(frozen=True)
class Selection:
    """Top-K heads per sign, before scaling factors are attached."""

    positive: tuple
    negative: tuple
    K: int
    truncated: bool  # fewer survivors than K on some side

    def plan(self, beta_plus: float = 1.0, beta_minus: float = -1.0) -> "InterventionPlan":
        return InterventionPlan(
            tuple((h, beta_plus) for h in self.positive),
            tuple((h, beta_minus) for h in self.negative),
            self.K,
        )


def select_topk(table: ScoreTable, head_sets: HeadSets, K: int) -> Selection:
    """Rank surviving heads by the sum of their per-type scores; ties keep head order."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    order = {h: n for n, h in enumerate(table.heads)}

    def top(sign, survivors):
        agg = table.aggregated(sign)
        ranked = sorted(survivors, key=lambda h: (-agg[h], order[h]))
        return tuple(ranked[:K])

    pos, neg = top("+", head_sets.H_plus), top("-", head_sets.H_minus)
    truncated = len(head_sets.H_plus) < K or len(head_sets.H_minus) < K
    if truncated:
        log.warning(
            "only %d positive / %d negative heads survived filtering, fewer than K=%d",
            len(head_sets.H_plus), len(head_sets.H_minus), K,
        )
    return Selection(pos, neg, K, truncated)


def identify_heads(
    model: TwoLayerModel,
    suite: ConflictSuite,
    alpha_plus=TOY_ALPHA_PLUS,
    alpha_minus=TOY_ALPHA_MINUS,
    K: int = 1,
    tol: float = 0.0,
):
    """Score, filter and select. Returns (table, head_sets, selection)."""
    table = record_head_scores(model, suite, alpha_plus, alpha_minus)
    head_sets = filter_inconsistent_heads(table, model.heads, tol)
    return table, head_sets, select_topk(table, head_sets, K)


@dataclass(frozen=True)
class InterventionPlan:
    positive_heads: tuple  # ((HeadRef, beta_plus), ...)
    negative_heads: tuple
    K: int = 1

    def __post_init__(self):
        for side in (self.positive_heads, self.negative_heads):
            heads = [h for h, _ in side]
            if len(set(heads)) != len(heads):
                raise ValueError("a head may appear at most once per sign")
            if not all(np.isfinite(b) for _, b in side):
                raise ValueError("scaling factors must be finite")

    @property
    def items(self) -> tuple:
        return self.positive_heads + self.negative_heads

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "positive_heads": [[h.layer, b] for h, b in self.positive_heads],
            "negative_heads": [[h.layer, b] for h, b in self.negative_heads],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InterventionPlan":
        def load(side):
            return tuple((HeadRef(int(layer)), float(b)) for layer, b in side)

        return cls(load(d["positive_heads"]), load(d["negative_heads"]), int(d.get("K", 1)))


def knockout_plan(heads: Iterable[HeadRef]) -> InterventionPlan:
    return InterventionPlan((), tuple((h, -1.0) for h in heads), K=0)


def single_pass_infer(model: TwoLayerModel, tokens, plan: InterventionPlan):
    """Scale the planned heads in place during one forward pass."""
    return evaluate(model, tokens, [ScaleAdd(h, b) for h, b in plan.items])


class JuiceResult(NamedTuple):
    probs: np.ndarray
    prediction: int
    lookup: dict
    cache: dict  # HeadRef -> d x t head output from the untouched run
    logits: np.ndarray


def juice_infer(model: TwoLayerModel, tokens, plan: InterventionPlan) -> JuiceResult:
    """Run once untouched to cache the planned heads, then rerun adding beta * cache."""
    first = forward(model, tokens)
    cache = {h: first.head_outputs[h.layer] for h, _ in plan.items}
    second = forward(model, tokens, [AddExternal(h, cache[h], b) for h, b in plan.items])
    ev = distribution(second.logits)
    return JuiceResult(ev.probs, ev.prediction, ev.lookup, cache, second.logits)


def dumps(obj) -> str:
    """Serialise a ScoreTable, HeadSets or InterventionPlan to canonical JSON."""
    return json.dumps({"type": type(obj).__name__, **obj.to_dict()}, sort_keys=True)


def loads(text: str):
    data = json.loads(text)
    kinds = {"ScoreTable": ScoreTable, "HeadSets": HeadSets, "InterventionPlan": InterventionPlan}
    kind = data.pop("type")
    if kind not in kinds:
        raise ValueError(f"unknown document type {kind!r}")
    return kinds[kind].from_dict(data)
