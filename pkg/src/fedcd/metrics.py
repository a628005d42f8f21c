"""Prediction metrics, group fairness and degree of agreement."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import models
from .data import QMatrix, Responses


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecords:
    """Column-wise test predictions: one row per scored response."""

    school: np.ndarray
    student: np.ndarray
    exercise: np.ndarray
    label: np.ndarray
    score: np.ndarray

    def __len__(self):
        return len(self.label)

    def take(self, index) -> "PredictionRecords":
        return PredictionRecords(
            self.school[index], self.student[index], self.exercise[index],
            self.label[index], self.score[index],
        )

    @classmethod
    def concat(cls, parts: Sequence["PredictionRecords"]) -> "PredictionRecords":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("school", "student", "exercise", "label", "score")))


def _scores_labels(records):
    if isinstance(records, PredictionRecords):
        return np.asarray(records.score, dtype=np.float64), np.asarray(records.label)
    scores, labels = records
    return np.asarray(scores, dtype=np.float64), np.asarray(labels)


def accuracy(records) -> float:
    """Share of records whose thresholded score (>= 0.5 predicts 1) equals the label.

    ``records`` is a :class:`PredictionRecords` or a ``(scores, labels)`` pair;
    the same goes for :func:`rmse` and :func:`auc`.
    """
    scores, labels = _scores_labels(records)
    if len(scores) == 0:
        raise MetricError("accuracy of an empty set")
    return float(np.mean((scores >= 0.5).astype(int) == labels))


def rmse(records) -> float:
    scores, labels = _scores_labels(records)
    if len(scores) == 0:
        raise MetricError("rmse of an empty set")
    return float(np.sqrt(np.mean((scores - labels) ** 2)))


def auc(records) -> float:
    """Mann-Whitney AUC via average-rank sums; ties count one half."""
    scores, labels = _scores_labels(records)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: need both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def group_fairness(per_client_acc: Mapping[int, float] | Sequence[float]) -> float:
    """Gap between the mean ACC of below-mean and at-or-above-mean clients."""
    values = np.asarray(
        list(per_client_acc.values()) if isinstance(per_client_acc, Mapping) else per_client_acc,
        dtype=np.float64,
    )
    if len(values) < 2:
        raise MetricError("group fairness needs at least two clients")
    upper = values >= values.mean()
    if upper.all() or not upper.any():
        return 0.0
    return float(abs(values[~upper].mean() - values[upper].mean()))


def latest_responses(logs: Responses) -> dict[tuple[int, int], int]:
    """(student, exercise) -> label of the last logged attempt."""
    return {(s, e): c for s, e, c in logs}


def degree_of_agreement(
    proficiency: np.ndarray,
    qmatrix: QMatrix,
    logs: Responses,
    exclude_ties: bool = False,
    return_per_concept: bool = False,
):
    """Mean per-concept degree of agreement between proficiency and responses.

    ``proficiency`` is an N x K array indexed by global student. For concept
    ``k`` and every ordered pair with ``F[a, k] > F[b, k]`` that shares at
    least one concept-``k`` exercise, the pair scores the share of those
    shared exercises where ``a`` answered right and ``b`` wrong. DOA(k) is
    the mean pair score; pairs sharing nothing are left out. Concepts without
    any scored pair are skipped.

    With ``exclude_ties`` only shared exercises on which the two students
    answered differently count, which puts an uninformative ranking at 0.5
    instead of at the rate of (right, wrong) response pairs.
    """
    F = np.asarray(proficiency, dtype=np.float64)
    q = qmatrix.entries.astype(bool)
    latest = latest_responses(logs)
    if not latest:
        raise MetricError("DOA undefined: no responses")
    pairs = np.array(list(latest.keys()), dtype=np.int64)
    labels = np.array(list(latest.values()), dtype=np.int64)
    if pairs[:, 0].max() >= F.shape[0]:
        raise MetricError("proficiency missing for a logged student")
    students = np.unique(pairs[:, 0])
    row = np.searchsorted(students, pairs[:, 0])
    n_s, M = len(students), qmatrix.num_exercises
    # R[a, j]: 1 right, 0 wrong; A[a, j]: attempted
    A = np.zeros((n_s, M), dtype=bool)
    R = np.zeros((n_s, M), dtype=np.float64)
    A[row, pairs[:, 1]] = True
    R[row, pairs[:, 1]] = labels

    per_concept = {}
    for k in range(qmatrix.num_concepts):
        cols = np.flatnonzero(q[:, k])
        if len(cols) == 0:
            continue
        a_k = A[:, cols].astype(np.float64)
        right = R[:, cols] * a_k
        wrong = (1.0 - R[:, cols]) * a_k
        shared = a_k @ a_k.T              # |exercises attempted by both|
        agree = right @ wrong.T           # |... where a right and b wrong|
        if exclude_ties:
            shared = agree + agree.T
        f = F[students, k]
        valid = (f[:, None] > f[None, :]) & (shared > 0)
        z = int(valid.sum())
        if z == 0:
            continue
        per_concept[k] = math.fsum((agree[valid] / shared[valid]).tolist()) / z
    if not per_concept:
        raise MetricError("DOA undefined: no concept has a comparable student pair")
    value = math.fsum(per_concept.values()) / len(per_concept)
    return (value, per_concept) if return_per_concept else value


# --------------------------------------------------------------------------
# evaluation


@dataclass
class ClientMetrics:
    acc: float
    rmse: float
    auc: float | None
    n_test: int


@dataclass
class MetricReport:
    acc: float
    rmse: float
    auc: float | None
    per_client: dict[int, ClientMetrics]
    gf: float | None
    doa: float | None = None
    client_mean_acc: float | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "pooled": {"acc": self.acc, "rmse": self.rmse, "auc": self.auc},
            "client_mean": {"acc": self.client_mean_acc},
            "per_client": {str(k): asdict(v) for k, v in sorted(self.per_client.items())},
            "gf": self.gf,
            "doa": self.doa,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            acc=d["pooled"]["acc"],
            rmse=d["pooled"]["rmse"],
            auc=d["pooled"]["auc"],
            per_client={int(k): ClientMetrics(**v) for k, v in d["per_client"].items()},
            gf=d["gf"],
            doa=d["doa"],
            client_mean_acc=d.get("client_mean", {}).get("acc"),
            config=d.get("config", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.from_dict(json.loads(text))

    def write_client_table(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("school_id", "n_test", "acc", "rmse", "auc"))
            for school, m in sorted(self.per_client.items()):
                w.writerow((school, m.n_test, repr(m.acc), repr(m.rmse), "" if m.auc is None else repr(m.auc)))


def _maybe_auc(records) -> float | None:
    try:
        return auc(records)
    except MetricError:
        return None


def score_clients(clients, qmatrix: QMatrix) -> PredictionRecords:
    """Each client scores its own test logs with its own model."""
    parts = []
    for c in clients:
        test = c.dataset.test
        local = c.dataset.local_index(test.student) if len(test) else test.student
        scores = models.predict(c.params, qmatrix, local, test.exercise) if len(test) else np.zeros(0)
        parts.append(PredictionRecords(
            np.full(len(test), c.school, dtype=np.int64),
            test.student, test.exercise, test.correct, scores,
        ))
    return PredictionRecords.concat(parts)


def report_from_records(records: PredictionRecords, doa: float | None = None, config=None) -> MetricReport:
    per_client = {}
    for school in np.unique(records.school).tolist():
        sub = records.take(records.school == school)
        per_client[int(school)] = ClientMetrics(accuracy(sub), rmse(sub), _maybe_auc(sub), len(sub))
    accs = [m.acc for m in per_client.values()]
    return MetricReport(
        acc=accuracy(records),
        rmse=rmse(records),
        auc=_maybe_auc(records),
        per_client=per_client,
        gf=group_fairness(accs) if len(accs) >= 2 else None,
        doa=doa,
        client_mean_acc=float(np.mean(accs)),
        config=dict(config or {}),
    )


def global_proficiency(clients, num_students: int | None = None) -> np.ndarray:
    """Stack every client's ``sigmoid(student embedding)`` into global rows."""
    if num_students is None:
        num_students = 1 + max(int(c.dataset.students.max()) for c in clients)
    dim = clients[0].params.dim
    F = np.full((num_students, dim), np.nan)
    for c in clients:
        F[c.dataset.students] = models.proficiency(c.params)
    return F


def evaluate(clients, qmatrix: QMatrix, with_doa: bool = False, config=None):
    """Score every client's test split; returns ``(report, records)``.

    DOA, when requested, is computed over all test logs pooled, using each
    client's own proficiency estimates for its students.
    """
    records = score_clients(clients, qmatrix)
    doa = None
    if with_doa:
        test = Responses(records.student, records.exercise, records.label)
        try:
            doa = degree_of_agreement(global_proficiency(clients), qmatrix, test)
        except MetricError:
            doa = None
    return report_from_records(records, doa, config), records
