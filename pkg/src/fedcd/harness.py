"""Experiment configuration, orchestration and result files.

A run is described by one JSON config (see ``configs/`` in the repository).
Every field has a default; unknown keys are rejected. Command-line overrides
use dotted paths, e.g. ``training.rounds=30``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import data as D
from . import federation as F
from . import metrics as Mx


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class SyntheticConfig:
    schools: int = 4
    students_per_school: int = 50
    exercises: int = 200
    concepts: int = 8
    school_ability_offsets: list = field(default_factory=lambda: [-2.0, 1.7, 1.7, 1.7])
    logs_per_student: int = 100
    student_spread: float = 1.5
    concept_spread: float = 0.5
    difficulty_spread: float = 1.5
    response_slope: float = 0.7
    max_concepts_per_exercise: int = 3

    def to_spec(self) -> D.SyntheticSpec:
        return D.SyntheticSpec(**dataclasses.asdict(self))


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" | "files"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    log_file: str | None = None
    qmatrix_file: str | None = None
    data_seed: int | None = None  # synthetic draw; None reuses the run seed
    min_student_logs: int = 5
    min_school_logs: int = 1000
    train_fraction: float = 0.8


@dataclass
class StrategySection:
    personalization: str = "full"
    aggregator: str = "fairness_softmax"
    gamma: float = 0.1
    dp_scale: float = 0.0
    attention_step: float = 1.0

    def build(self) -> F.StrategyConfig:
        return F.StrategyConfig(
            self.personalization,
            F.make_strategy(self.aggregator, self.gamma, self.attention_step),
            self.dp_scale,
        )


@dataclass
class ModelSection:
    kind: str = "ncd"
    dim: int | None = None  # must equal the number of concepts when set
    clip_fc: bool = False
    loss_reduction: str = "mean"


@dataclass
class TrainingSection:
    rounds: int = 100
    local_epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 0.001
    centralized: bool = False
    workers: int = 1


@dataclass
class ExperimentConfig:
    name: str = "fedcd"
    data: DataConfig = field(default_factory=DataConfig)
    strategy: StrategySection = field(default_factory=StrategySection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs/fedcd"
    checkpoint_every: int = 0
    evaluate_doa: bool = True

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self) -> "ExperimentConfig":
        def need(ok, path, reason):
            if not ok:
                raise ConfigError(f"{path}: {reason}")

        d, t = self.data, self.training
        need(d.source in ("synthetic", "files"), "data.source", "must be 'synthetic' or 'files'")
        if d.source == "files":
            need(bool(d.log_file), "data.log_file", "required when data.source is 'files'")
            need(bool(d.qmatrix_file), "data.qmatrix_file", "required when data.source is 'files'")
        need(0.0 < d.train_fraction < 1.0, "data.train_fraction", "must lie in (0, 1)")
        need(d.min_student_logs >= 0, "data.min_student_logs", "must be >= 0")
        need(d.min_school_logs >= 0, "data.min_school_logs", "must be >= 0")
        try:
            self.strategy.build()
        except ValueError as e:
            raise ConfigError(f"strategy: {e}") from None
        need(self.strategy.gamma >= 0 and math.isfinite(self.strategy.gamma), "strategy.gamma", "must be finite and >= 0")
        need(self.model.kind in ("ncd", "dina"), "model.kind", "must be 'ncd' or 'dina'")
        need(self.model.dim is None or self.model.dim >= 1, "model.dim", "must be >= 1")
        need(self.model.loss_reduction in ("mean", "sum"), "model.loss_reduction", "must be 'mean' or 'sum'")
        need(t.rounds >= 1, "training.rounds", "must be >= 1")
        need(t.local_epochs >= 1, "training.local_epochs", "must be >= 1")
        need(t.batch_size >= 1, "training.batch_size", "must be >= 1")
        need(t.learning_rate > 0, "training.learning_rate", "must be > 0")
        need(t.workers >= 1, "training.workers", "must be >= 1")
        need(len(self.seeds) >= 1, "seeds", "need at least one seed")
        need(all(isinstance(s, int) and s >= 0 for s in self.seeds), "seeds", "must be non-negative integers")
        need(self.checkpoint_every >= 0, "checkpoint_every", "must be >= 0")
        return self


def _from_dict(cls, values: dict, path: str = ""):
    if not isinstance(values, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        full = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown config key {full!r}")
        sub = _SECTIONS.get((cls, key))
        kwargs[key] = _from_dict(sub, value, full) if sub else value
    return cls(**kwargs)


_SECTIONS = {
    (ExperimentConfig, "data"): DataConfig,
    (ExperimentConfig, "strategy"): StrategySection,
    (ExperimentConfig, "model"): ModelSection,
    (ExperimentConfig, "training"): TrainingSection,
    (DataConfig, "synthetic"): SyntheticConfig,
}


def config_from_dict(values: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, values).validate()


def parse_config(text: str) -> ExperimentConfig:
    try:
        values = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return config_from_dict(values)


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    values = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    return config_from_dict(apply_overrides(values, overrides))


def apply_overrides(values: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON when possible."""
    values = json.loads(json.dumps(values))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.strip().split(".")
        node = values
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = value
    return values


# --------------------------------------------------------------------------
# pipeline


@dataclass
class PreparedData:
    catalog: D.EntityCatalog
    qmatrix: D.QMatrix
    clients: list[D.ClientDataset]


def prepare_data(config: ExperimentConfig, seed: int) -> PreparedData:
    d = config.data
    try:
        if d.source == "synthetic":
            data_seed = seed if d.data_seed is None else d.data_seed
            catalog, qmatrix, logs = D.generate_synthetic(d.synthetic.to_spec(), data_seed)
        else:
            catalog, qmatrix, logs, _ = D.ingest_logs(d.log_file, d.qmatrix_file)
    except (ValueError, OSError) as e:
        raise StageError("ingest" if d.source == "files" else "generate", e) from e
    try:
        catalog, logs = D.filter_dataset(logs, catalog, d.min_student_logs, d.min_school_logs)
    except ValueError as e:
        raise StageError("filter", e) from e
    if config.model.dim is not None and config.model.dim != catalog.num_concepts:
        raise StageError("train", ConfigError(
            f"model.dim={config.model.dim} but the data has {catalog.num_concepts} concepts"))
    clients = D.split_clients(logs, catalog, d.train_fraction, seed)
    return PreparedData(catalog, qmatrix, clients)


def _model_config(config: ExperimentConfig) -> F.ModelConfig:
    return F.ModelConfig(
        config.model.kind, config.training.learning_rate,
        config.model.clip_fc, config.model.loss_reduction,
    )


@dataclass
class SeedResult:
    seed: int
    report: Mx.MetricReport
    records: Mx.PredictionRecords
    trace: list
    clients: list


def run_seed(config: ExperimentConfig, seed: int, checkpoint_dir=None) -> SeedResult:
    """Full pipeline for one seed, in memory."""
    prepared = prepare_data(config, seed)
    t = config.training
    model = _model_config(config)
    try:
        if t.centralized:
            pooled = D.pool_clients(prepared.clients)
            central = F.run_centralized(
                pooled, prepared.qmatrix, t.rounds * t.local_epochs, t.batch_size, seed, model
            )
            clients = _split_central(central, prepared.clients)
            trace = []
        else:
            result = F.run_protocol(
                prepared.clients, prepared.qmatrix, config.strategy.build(),
                t.rounds, t.local_epochs, t.batch_size, seed, model,
                workers=t.workers, checkpoint_dir=checkpoint_dir,
                checkpoint_every=config.checkpoint_every,
            )
            clients, trace = result.clients, result.trace
    except ValueError as e:
        raise StageError("train", e) from e
    try:
        report, records = Mx.evaluate(
            clients, prepared.qmatrix, with_doa=config.evaluate_doa,
            config={"name": config.name, "seed": seed},
        )
    except ValueError as e:
        raise StageError("evaluate", e) from e
    return SeedResult(seed, report, records, trace, clients)


def _split_central(central: F.ClientState, datasets) -> list[F.ClientState]:
    """View one centrally trained model as per-school clients for evaluation."""
    out = []
    pooled = central.dataset
    for d in datasets:
        rows = pooled.local_index(d.students)
        params = central.params.copy()
        params.student = params.student[rows]
        out.append(F.ClientState(d.school, params, central.optimizer, d, central.rng, central.noise_rng))
    return out


# --------------------------------------------------------------------------
# files


def write_trace(path, trace) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("round", "school_id", "client_loss", "aggregation_weight"))
        for r, school, loss, weight in trace:
            w.writerow((r, school, repr(float(loss)), repr(float(weight))))


def read_trace(path) -> list[tuple[int, int, float, float]]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            (int(r["round"]), int(r["school_id"]), float(r["client_loss"]), float(r["aggregation_weight"]))
            for r in csv.DictReader(f)
        ]


def write_predictions(path, records: Mx.PredictionRecords) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("school_id", "student", "exercise", "label", "score"))
        for row in zip(records.school.tolist(), records.student.tolist(), records.exercise.tolist(),
                       records.label.tolist(), records.score.tolist()):
            w.writerow((*row[:4], repr(row[4])))


def read_predictions(path) -> Mx.PredictionRecords:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    col = lambda k, t: np.array([t(r[k]) for r in rows], dtype=t)  # noqa: E731
    return Mx.PredictionRecords(
        col("school_id", np.int64), col("student", np.int64), col("exercise", np.int64),
        col("label", np.int64), col("score", np.float64),
    )


def summarize(reports: Sequence[Mx.MetricReport]) -> dict:
    """Mean and sample std over seeds of every scalar metric."""
    def stats(values):
        values = [v for v in values if v is not None]
        if not values:
            return None
        return {"mean": float(np.mean(values)), "std": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0}

    out = {
        "acc": stats([r.acc for r in reports]),
        "rmse": stats([r.rmse for r in reports]),
        "auc": stats([r.auc for r in reports]),
        "gf": stats([r.gf for r in reports]),
        "doa": stats([r.doa for r in reports]),
        "client_mean_acc": stats([r.client_mean_acc for r in reports]),
        "per_client_acc": {},
    }
    schools = sorted({s for r in reports for s in r.per_client})
    for s in schools:
        out["per_client_acc"][str(s)] = stats([r.per_client[s].acc for r in reports if s in r.per_client])
    return out


def run_experiment(config: ExperimentConfig, out_dir=None, seeds: Sequence[int] | None = None) -> dict:
    """Run every seed and write the run record plus per-seed files.

    Layout under ``out_dir``: ``run_record.json`` and, per seed,
    ``seed_<s>/{report.json, per_client.csv, loss_trace.csv, predictions.csv}``.
    Seeds run concurrently when ``training.workers > 1``.
    """
    config.validate()
    if seeds is not None:
        config = dataclasses.replace(config, seeds=list(seeds))
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()

    def one(seed):
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)
        res = run_seed(config, seed, checkpoint_dir=seed_dir / "checkpoints")
        (seed_dir / "report.json").write_text(res.report.to_json(), encoding="utf-8")
        res.report.write_client_table(seed_dir / "per_client.csv")
        write_trace(seed_dir / "loss_trace.csv", res.trace)
        write_predictions(seed_dir / "predictions.csv", res.records)
        return res

    # seeds are independent; client-level threading stays inside each seed
    if config.training.workers > 1 and len(config.seeds) > 1:
        with ThreadPoolExecutor(max_workers=config.training.workers) as ex:
            results = list(ex.map(one, config.seeds))
    else:
        results = [one(s) for s in config.seeds]

    record = {
        "config": config.to_dict(),
        "seeds": list(config.seeds),
        "reports": {str(r.seed): r.report.to_dict() for r in results},
        "summary": summarize([r.report for r in results]),
        "loss_traces": {str(r.seed): f"seed_{r.seed}/loss_trace.csv" for r in results},
        "wall_clock_sec": time.perf_counter() - start,
    }
    (out / "run_record.json").write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")
    return record


def load_record(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "run_record.json"
    return json.loads(path.read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# comparison


def compare_records(records: Sequence[dict]) -> list[list[str]]:
    """Side-by-side table of seed-mean metrics, one column per run.

    Rows: pooled acc/rmse/auc, gf, doa, client-mean acc, then ACC per school.
    """
    if not records:
        raise ValueError("nothing to compare")
    ref = records[0]["config"]["data"]
    for r in records[1:]:
        if r["config"]["data"] != ref:
            raise ValueError(
                f"run {r['config']['name']!r} used a different data source than {records[0]['config']['name']!r}"
            )
    names = [r["config"]["name"] for r in records]
    rows = [["metric", *names]]

    def cell(stat):
        return "" if stat is None else f"{stat['mean']:.4f}"

    for key in ("acc", "rmse", "auc", "gf", "doa", "client_mean_acc"):
        rows.append([key, *(cell(r["summary"][key]) for r in records)])
    schools = sorted({s for r in records for s in r["summary"]["per_client_acc"]}, key=int)
    for s in schools:
        rows.append([f"acc_school_{s}", *(cell(r["summary"]["per_client_acc"].get(s)) for r in records)])
    return rows


def format_table(rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def parse_table(text: str) -> dict[str, dict[str, float | None]]:
    """Inverse of :func:`format_table` for comparison tables: metric -> run -> value."""
    rows = list(csv.reader(io.StringIO(text)))
    names = rows[0][1:]
    return {
        row[0]: {n: (float(v) if v else None) for n, v in zip(names, row[1:])}
        for row in rows[1:]
    }


def to_jsonable(obj: Any):
    return json.loads(json.dumps(obj, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))
