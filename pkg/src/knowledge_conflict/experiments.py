"""Seeded experiment runner with flat CSV output.

Every experiment draws all randomness from ``make_rng(config.seed)`` in a fixed
order, so a (config, seed) pair always yields byte-identical files.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .intervention import (
    CLEAN_FACTUAL,
    CONFLICT,
    TOY_ALPHA_MINUS,
    TOY_ALPHA_PLUS,
    identify_heads,
    juice_infer,
    knockout_plan,
    single_pass_infer,
    toy_suite,
)
from .model import (
    ALL_HEADS,
    LAYER1,
    LAYER2,
    ConstructionConsts,
    INDUCTION_DOMINANT,
    Winner,
    build_perfect_solver,
    conflict_winner_closed_form,
    evaluate,
)
from .numerics import derive_seed, finite_diff_grad, make_rng, relative_error
from .tasks import Kind, build_vocab, conflict_with_clean_twin, generate_batch, training_dataset
from .training import (
    Attention,
    LinearAttnModel,
    TrainConfig,
    cross_entropy,
    gd_train,
    gradients,
    prepare_inputs,
    strict_embeddings,
)

KINDS = ("solve_eval", "conflict_sweep", "knockout_scan", "gradcheck", "train_dyn", "identify_compare")
CSV_HEADER = ("kind", "params_json", "metric", "value", "seed")

SOLVER_CONSTS = ConstructionConsts(C=20.0, C1=8.0, C2=8.0, C3=10.0, C4=10.0)

_KIND_DEFAULTS = {
    "solve_eval": {"consts": asdict(SOLVER_CONSTS), "trials": 1000},
    "conflict_sweep": {"consts": asdict(SOLVER_CONSTS), "trials": 200},
    "knockout_scan": {"consts": asdict(INDUCTION_DOMINANT), "trials": 100},
    "gradcheck": {"trials": 20, "n_subjects": 3, "n_noise": 8, "T": 6},
    "train_dyn": {"trials": 1},
    "identify_compare": {"consts": asdict(INDUCTION_DOMINANT), "trials": 500},
}


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed: int
    n_subjects: int = 8
    n_noise: int = 32
    T: int = 8
    d: int = 128
    embedding_mode: str = "orthonormal"
    consts: Optional[dict] = None
    c1_grid: tuple = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
    c2_grid: tuple = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
    c3_grid: tuple = (1.0, 5.0, 10.0)
    c4_grid: tuple = (1.0, 5.0, 10.0)
    boundary_tol: float = 0.1
    alpha_plus: tuple = TOY_ALPHA_PLUS
    alpha_minus: tuple = TOY_ALPHA_MINUS
    beta_plus: float = 1.0
    beta_minus: float = -1.0
    K: int = 1
    suite_size: int = 4
    filter_tol: float = 0.0
    trials: Optional[int] = None
    eta1_grid: tuple = (1.0,)
    eta2_grid: tuple = (50.0,)
    fd_step: float = 1e-4
    out_dir: str = "results"

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


_TUPLE_FIELDS = {f.name for f in fields(ExperimentConfig) if f.type == "tuple"}


def validate_config(raw: dict, explicit: Optional[set] = None) -> ExperimentConfig:
    """Check a raw mapping and fill kind-specific defaults.

    ``explicit`` names fields set by the user; kind defaults never override them.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "kind" not in raw:
        raise ConfigError("missing required field 'kind'")
    kind = raw["kind"]
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of: {', '.join(KINDS)}")
    if raw.get("seed") is None:
        raise ConfigError("missing required field 'seed'")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
    explicit = set(raw) if explicit is None else explicit
    values = dict(raw)
    for k, v in _KIND_DEFAULTS[kind].items():
        if k not in explicit or values.get(k) is None:
            values[k] = v
    try:
        values["seed"] = int(values["seed"])
        for k in _TUPLE_FIELDS:
            if k in values:
                values[k] = tuple(float(x) for x in values[k])
        cfg = ExperimentConfig(**values)
        cfg = replace(cfg, consts=asdict(ConstructionConsts(**cfg.consts)) if cfg.consts else None)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    if cfg.embedding_mode not in ("orthonormal", "sphere"):
        raise ConfigError(f"embedding_mode must be 'orthonormal' or 'sphere', got {cfg.embedding_mode!r}")
    for name in ("n_subjects", "n_noise", "T", "d", "K", "suite_size", "trials"):
        if getattr(cfg, name) is not None and getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return validate_config(raw)


@dataclass(frozen=True)
class ResultRow:
    kind: str
    params: dict
    metric: str
    value: float
    seed: int

    def csv_fields(self) -> tuple:
        return (
            self.kind,
            json.dumps(self.params, sort_keys=True, separators=(",", ":")),
            self.metric,
            repr(float(self.value)),
            str(self.seed),
        )


# Experiments ---------------------------------------------------------------


def _setup(cfg: ExperimentConfig):
    rng = make_rng(cfg.seed)
    vocab = build_vocab(cfg.n_subjects, cfg.n_noise, rng)
    return rng, vocab


def _solver(cfg, vocab, rng, consts=None):
    consts = ConstructionConsts(**(consts or cfg.consts))
    return build_perfect_solver(vocab, cfg.T, cfg.d, consts, derive_seed(rng), cfg.embedding_mode)


def _solve_eval(cfg: ExperimentConfig) -> tuple:
    rng, vocab = _setup(cfg)
    model = _solver(cfg, vocab, rng)
    rows = []
    for kind in (Kind.FACTUAL, Kind.INDUCTION):
        batch = generate_batch(vocab, kind, cfg.T, cfg.trials, rng)
        acc = np.mean([evaluate(model, s.tokens).prediction == s.target for s in batch])
        rows.append(ResultRow(cfg.kind, {"task": kind.value}, "accuracy", float(acc), cfg.seed))
    return rows, {}


def _classify(pred: int, seq) -> str:
    if pred == seq.parametric_answer:
        return Winner.FACTUAL.value
    if pred == seq.contextual_answer:
        return Winner.INDUCTION.value
    return "Other"


def _conflict_sweep(cfg: ExperimentConfig) -> tuple:
    rng, vocab = _setup(cfg)
    model_seed = derive_seed(rng)
    sequences = generate_batch(vocab, Kind.CONFLICT, cfg.T, cfg.trials, rng)
    rows = []
    for c1, c2, c3, c4 in itertools.product(cfg.c1_grid, cfg.c2_grid, cfg.c3_grid, cfg.c4_grid):
        consts = ConstructionConsts(C=cfg.consts["C"], C1=c1, C2=c2, C3=c3, C4=c4)
        model = build_perfect_solver(vocab, cfg.T, cfg.d, consts, model_seed, cfg.embedding_mode)
        predicted = conflict_winner_closed_form(consts, cfg.boundary_tol).value
        outcomes = [_classify(evaluate(model, s.tokens).prediction, s) for s in sequences]
        empirical = outcomes[0] if len(set(outcomes)) == 1 else "Mixed"
        if predicted == Winner.BOUNDARY.value:
            agreement = math.nan
        else:
            agreement = float(np.mean([o == predicted for o in outcomes]))
        params = {"C1": c1, "C2": c2, "C3": c3, "C4": c4, "predicted": predicted, "empirical": empirical}
        rows.append(ResultRow(cfg.kind, params, "agreement", agreement, cfg.seed))
    return rows, {}


_HEAD_GROUPS = {"L1": (LAYER1,), "L2": (LAYER2,), "L1+L2": ALL_HEADS}


def _knockout_scan(cfg: ExperimentConfig) -> tuple:
    rng, vocab = _setup(cfg)
    model = _solver(cfg, vocab, rng)
    pairs = [conflict_with_clean_twin(vocab, cfg.T, rng) for _ in range(cfg.trials)]
    inputs = {CLEAN_FACTUAL: [clean for _, clean in pairs], CONFLICT: [conf for conf, _ in pairs]}
    rows = []
    for group, heads in _HEAD_GROUPS.items():
        plan = knockout_plan(heads)
        for ctype, seqs in inputs.items():
            deltas = [
                single_pass_infer(model, s.tokens, plan).probs[s.parametric_answer]
                - evaluate(model, s.tokens).probs[s.parametric_answer]
                for s in seqs
            ]
            params = {"heads": group, "conflict_type": ctype}
            rows.append(ResultRow(cfg.kind, params, "delta_p_param", float(np.mean(deltas)), cfg.seed))
    return rows, {}


def _gradcheck(cfg: ExperimentConfig) -> tuple:
    rng, vocab = _setup(cfg)
    emb = strict_embeddings(vocab)
    d = emb.phi.shape[0]
    lin = TrainConfig(attention=Attention.LINEAR)
    data = prepare_inputs(vocab, training_dataset(vocab, cfg.T, rng), emb)
    rows, worst = [], {"W_OV": 0.0, "W_KQ": 0.0}
    for trial in range(cfg.trials):
        W_KQ = rng.standard_normal((d, d)) / math.sqrt(d)
        W_OV = rng.standard_normal((d, d)) / math.sqrt(d)
        idx = int(rng.integers(0, len(data)))
        X, y = data.X[idx], int(data.y[idx])
        model = LinearAttnModel(W_KQ, W_OV, emb)
        neg_ov, neg_kq = gradients(model, X, y, lin)
        fd_ov = finite_diff_grad(lambda W: cross_entropy(LinearAttnModel(W_KQ, W, emb), X, y, lin), W_OV, cfg.fd_step)
        fd_kq = finite_diff_grad(lambda W: cross_entropy(LinearAttnModel(W, W_OV, emb), X, y, lin), W_KQ, cfg.fd_step)
        for name, formula, fd in (("W_OV", -neg_ov, fd_ov), ("W_KQ", -neg_kq, fd_kq)):
            err = relative_error(formula, fd)
            worst[name] = max(worst[name], err)
            rows.append(ResultRow(cfg.kind, {"setting": trial, "matrix": name}, "rel_error", err, cfg.seed))
    for name, err in worst.items():
        rows.append(ResultRow(cfg.kind, {"matrix": name}, "max_rel_error", err, cfg.seed))
    return rows, {}


def _train_dyn(cfg: ExperimentConfig) -> tuple:
    rng, vocab = _setup(cfg)
    emb = strict_embeddings(vocab)
    batch = prepare_inputs(vocab, training_dataset(vocab, cfg.T, rng), emb)
    rows, reports = [], {}
    for eta1, eta2 in itertools.product(cfg.eta1_grid, cfg.eta2_grid):
        result = gd_train(LinearAttnModel.zeros(emb), batch, TrainConfig(eta1, eta2), steps=2)
        step1, step2 = result.reports
        params = {"eta1": eta1, "eta2": eta2}
        kinds = np.array([k.value for k in batch.kinds])

        def emit(metric, value, **extra):
            rows.append(ResultRow(cfg.kind, {**params, **extra}, metric, float(value), cfg.seed))

        for step, loss in enumerate(result.losses):
            emit("loss", loss, step=step)
        emit("wkq_zero_after_step1", bool(np.all(result.W_KQ_history[0] == 0.0)), step=1)
        emit("fact_argmax_fraction", step1.fact_accuracy, step=1)
        emit("attention_focus_fraction", step2.focus_fraction, step=2)
        for task in (Kind.FACTUAL, Kind.INDUCTION):
            emit("attention_focus_fraction", np.mean(step2.focus[kinds == task.value]), step=2, task=task.value)
        reports[f"eta1={eta1!r},eta2={eta2!r}"] = result.to_dict()
    return rows, {"train_report": reports}


def _identify_compare(cfg: ExperimentConfig) -> tuple:
    rng, vocab = _setup(cfg)
    model = _solver(cfg, vocab, rng)
    suite = toy_suite(vocab, cfg.T, cfg.suite_size, rng)
    table, head_sets, selection = identify_heads(
        model, suite, cfg.alpha_plus, cfg.alpha_minus, cfg.K, cfg.filter_tol
    )
    plan = selection.plan(cfg.beta_plus, cfg.beta_minus)
    held_out = generate_batch(vocab, Kind.CONFLICT, cfg.T, cfg.trials, rng)

    rows = []
    for sign, scores in (("+", table.S_plus), ("-", table.S_minus)):
        for (ctype, head), value in scores.items():
            params = {"sign": sign, "conflict_type": ctype, "head": str(head)}
            rows.append(ResultRow(cfg.kind, params, "head_score", value, cfg.seed))
    for sign, heads in (("+", selection.positive), ("-", selection.negative)):
        for rank, head in enumerate(heads):
            rows.append(ResultRow(cfg.kind, {"sign": sign, "rank": rank}, "selected_layer", head.layer, cfg.seed))

    both = knockout_plan(ALL_HEADS)
    methods = {
        "original": lambda s: evaluate(model, s.tokens),
        "knockout_L1": lambda s: single_pass_infer(model, s.tokens, knockout_plan((LAYER1,))),
        "knockout_L2": lambda s: single_pass_infer(model, s.tokens, knockout_plan((LAYER2,))),
        "knockout_both": lambda s: single_pass_infer(model, s.tokens, both),
        "june": lambda s: single_pass_infer(model, s.tokens, plan),
        "juice": lambda s: juice_infer(model, s.tokens, plan),
        "juice_both": lambda s: juice_infer(model, s.tokens, both),
    }
    for name, run in methods.items():
        results = [(run(s), s) for s in held_out]
        acc = np.mean([r.prediction == s.parametric_answer for r, s in results])
        p = np.mean([r.probs[s.parametric_answer] for r, s in results])
        rows.append(ResultRow(cfg.kind, {"method": name}, "parametric_accuracy", float(acc), cfg.seed))
        rows.append(ResultRow(cfg.kind, {"method": name}, "mean_p_param", float(p), cfg.seed))
    artifacts = {
        "score_table": table.to_dict(),
        "head_sets": head_sets.to_dict(),
        "plan": plan.to_dict(),
    }
    return rows, artifacts


_RUNNERS = {
    "solve_eval": _solve_eval,
    "conflict_sweep": _conflict_sweep,
    "knockout_scan": _knockout_scan,
    "gradcheck": _gradcheck,
    "train_dyn": _train_dyn,
    "identify_compare": _identify_compare,
}


def run_experiment_with_artifacts(cfg: ExperimentConfig) -> tuple:
    """(rows, artifacts); artifacts are JSON-ready side outputs keyed by name."""
    try:
        return _RUNNERS[cfg.kind](cfg)
    except Exception as exc:
        raise ExperimentError(f"{cfg.kind} (seed={cfg.seed}) failed: {exc}") from exc


def run_experiment(cfg: ExperimentConfig) -> list:
    return run_experiment_with_artifacts(cfg)[0]


# Output --------------------------------------------------------------------


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(row.csv_fields())
    return buf.getvalue()


def manifest(cfg: ExperimentConfig, n_rows: int) -> dict:
    return {"artifact": "knowledge_conflict", "version": __version__, "config": cfg.to_dict(), "rows": n_rows}


def write_outputs(rows, cfg: ExperimentConfig, out_dir=None, artifacts: Optional[dict] = None) -> dict:
    """Write ``<kind>.csv``, ``<kind>.manifest.json`` and one JSON file per artifact."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    written = {}
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{cfg.kind}.csv"
        csv_path.write_text(rows_to_csv(rows), encoding="utf-8")
        written["csv"] = csv_path
        man_path = out / f"{cfg.kind}.manifest.json"
        man_path.write_text(json.dumps(manifest(cfg, len(rows)), sort_keys=True, indent=2) + "\n")
        written["manifest"] = man_path
        for name, payload in (artifacts or {}).items():
            path = out / f"{cfg.kind}.{name}.json"
            path.write_text(json.dumps(payload, sort_keys=True) + "\n")
            written[name] = path
    except OSError as exc:
        raise OSError(f"could not write outputs under {out}: {exc}") from exc
    return written


def config_from_manifest(path) -> ExperimentConfig:
    data = json.loads(Path(path).read_text())
    return validate_config(data["config"])


def read_rows(path) -> list:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [
            ResultRow(r["kind"], json.loads(r["params_json"]), r["metric"], float(r["value"]), int(r["seed"]))
            for r in reader
        ]
