"""Cognitive-diagnosis models with hand-written gradients.

Two model kinds share one parameter container:

* ``"ncd"`` -- the neural diagnosis network. Exercise rows are D-dim
  embeddings; the diagnostic block holds ``w_disc`` (D x 1) and three
  bias-free layers ``w_fc1`` (D x 4D), ``w_fc2`` (4D x 2D), ``w_fc3`` (2D x 1).
* ``"dina"`` -- a differentiable DINA. Exercise rows are the two
  pre-activations ``(guess, slip)``; guess and slip are ``0.5 * sigmoid`` of
  them, mastery is the product of ``sigmoid(student_k)`` over the exercise's
  concepts. There is no diagnostic block.

Forward functions are batched over index arrays and return a cache that
:func:`backward` consumes. Gradients are of the *mean* BCE over the batch.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data import ClientDataset, QMatrix

EPS_CLIP = 1e-7
INIT_RANGE = 0.1
MODEL_KINDS = ("ncd", "dina")
DIAGNOSTIC_NAMES = ("w_disc", "w_fc1", "w_fc2", "w_fc3")
FC_NAMES = ("w_fc1", "w_fc2", "w_fc3")
BLOCKS = ("student", "exercise", "diagnostic")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def diagnostic_shapes(dim: int) -> dict[str, tuple[int, int]]:
    return {
        "w_disc": (dim, 1),
        "w_fc1": (dim, 4 * dim),
        "w_fc2": (4 * dim, 2 * dim),
        "w_fc3": (2 * dim, 1),
    }


@dataclass
class ModelParams:
    """Student, exercise and diagnostic parameter blocks of one model."""

    kind: str
    student: np.ndarray
    exercise: np.ndarray
    diagnostic: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "dina" and self.exercise.shape[1] != 2:
            raise ValueError("dina exercise block must be M x 2")
        if self.kind == "ncd":
            if self.exercise.shape[1] != self.dim:
                raise ValueError("ncd exercise and student embeddings must share D")
            shapes = diagnostic_shapes(self.dim)
            if set(self.diagnostic) != set(shapes):
                raise ValueError(f"ncd diagnostic block needs {sorted(shapes)}")
            for name, shape in shapes.items():
                if self.diagnostic[name].shape != shape:
                    raise ValueError(f"{name} has shape {self.diagnostic[name].shape}, want {shape}")
        elif self.diagnostic:
            raise ValueError("dina has no diagnostic parameters")

    @property
    def dim(self) -> int:
        return self.student.shape[1]

    @property
    def num_students(self) -> int:
        return self.student.shape[0]

    @property
    def num_exercises(self) -> int:
        return self.exercise.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every parameter (shared storage)."""
        return {"student": self.student, "exercise": self.exercise, **self.diagnostic}

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def zeros_like(self) -> "ModelParams":
        return ModelParams(
            self.kind,
            np.zeros_like(self.student),
            np.zeros_like(self.exercise),
            {k: np.zeros_like(v) for k, v in self.diagnostic.items()},
        )

    def equals(self, other: "ModelParams") -> bool:
        a, b = self.arrays(), other.arrays()
        return self.kind == other.kind and a.keys() == b.keys() and all(
            np.array_equal(a[k], b[k]) for k in a
        )


def init_params(kind: str, num_students: int, num_exercises: int, dim: int, rng) -> ModelParams:
    """Uniform(-0.1, 0.1) initialization of every entry."""
    rng = np.random.default_rng(rng)

    def u(shape):
        return rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)

    if kind == "ncd":
        return ModelParams(
            kind,
            u((num_students, dim)),
            u((num_exercises, dim)),
            {name: u(shape) for name, shape in diagnostic_shapes(dim).items()},
        )
    if kind == "dina":
        return ModelParams(kind, u((num_students, dim)), u((num_exercises, 2)))
    raise ValueError(f"unknown model kind {kind!r}")


# --------------------------------------------------------------------------
# forward passes


def ncd_forward(params: ModelParams, qmatrix: QMatrix, student, exercise):
    student = np.atleast_1d(np.asarray(student, dtype=np.int64))
    exercise = np.atleast_1d(np.asarray(exercise, dtype=np.int64))
    if params.dim != qmatrix.num_concepts:
        raise ValueError("ncd needs embedding size D equal to the number of concepts K")
    w = params.diagnostic
    h_s = params.student[student]
    h_e = params.exercise[exercise]
    h_c = qmatrix.entries[exercise]
    f_s = sigmoid(h_s)
    f_diff = sigmoid(h_e)
    f_disc = sigmoid(h_e @ w["w_disc"])
    y = h_c * (f_s - f_diff) * f_disc
    a1 = sigmoid(y @ w["w_fc1"])
    a2 = sigmoid(a1 @ w["w_fc2"])
    z3 = (a2 @ w["w_fc3"])[:, 0]
    pred = sigmoid(z3)
    cache = dict(
        kind="ncd", student=student, exercise=exercise, h_e=h_e, h_c=h_c,
        f_s=f_s, f_diff=f_diff, f_disc=f_disc, y=y, a1=a1, a2=a2, pred=pred,
    )
    return pred, cache


def dina_forward(params: ModelParams, qmatrix: QMatrix, student, exercise):
    student = np.atleast_1d(np.asarray(student, dtype=np.int64))
    exercise = np.atleast_1d(np.asarray(exercise, dtype=np.int64))
    if params.dim != qmatrix.num_concepts:
        raise ValueError("dina needs one student parameter per concept")
    pre = params.exercise[exercise]
    sig_g, sig_s = sigmoid(pre[:, 0]), sigmoid(pre[:, 1])
    guess, slip = 0.5 * sig_g, 0.5 * sig_s
    h_c = qmatrix.entries[exercise]
    theta = params.student[student]
    eta = np.exp((h_c * log_sigmoid(theta)).sum(axis=1))
    pred = guess + (1.0 - slip - guess) * eta
    cache = dict(
        kind="dina", student=student, exercise=exercise, h_c=h_c, theta=theta,
        sig_g=sig_g, sig_s=sig_s, guess=guess, slip=slip, eta=eta, pred=pred,
    )
    return pred, cache


def forward(params: ModelParams, qmatrix: QMatrix, student, exercise):
    if params.kind == "ncd":
        return ncd_forward(params, qmatrix, student, exercise)
    return dina_forward(params, qmatrix, student, exercise)


def predict(params: ModelParams, qmatrix: QMatrix, student, exercise) -> np.ndarray:
    return forward(params, qmatrix, student, exercise)[0]


def proficiency(params: ModelParams) -> np.ndarray:
    """Per-concept mastery estimate, ``sigmoid`` of the student embedding."""
    return sigmoid(params.student)


def bce_loss(prediction, label):
    """Element-wise binary cross-entropy with predictions clamped to [1e-7, 1-1e-7]."""
    p = np.clip(prediction, EPS_CLIP, 1.0 - EPS_CLIP)
    r = np.asarray(label, dtype=np.float64)
    return -(r * np.log(p) + (1.0 - r) * np.log1p(-p))


# --------------------------------------------------------------------------
# backward


def backward(params: ModelParams, cache, label) -> ModelParams:
    """Gradient of the mean clamped BCE over the cached batch."""
    label = np.atleast_1d(np.asarray(label, dtype=np.float64))
    grads = params.zeros_like()
    n = len(label)
    pred = cache["pred"]
    live = (pred > EPS_CLIP) & (pred < 1.0 - EPS_CLIP)
    if cache["kind"] == "ncd":
        _ncd_backward(params, cache, label, live, n, grads)
    else:
        _dina_backward(params, cache, label, live, n, grads)
    return grads


def _ncd_backward(params, cache, label, live, n, grads):
    w = params.diagnostic
    g = grads.diagnostic
    # d loss / d z3 for sigmoid + BCE
    dz3 = (np.where(live, cache["pred"] - label, 0.0) / n)[:, None]
    a1, a2, y = cache["a1"], cache["a2"], cache["y"]
    g["w_fc3"][:] = a2.T @ dz3
    dz2 = (dz3 @ w["w_fc3"].T) * a2 * (1.0 - a2)
    g["w_fc2"][:] = a1.T @ dz2
    dz1 = (dz2 @ w["w_fc2"].T) * a1 * (1.0 - a1)
    g["w_fc1"][:] = y.T @ dz1
    dy = dz1 @ w["w_fc1"].T

    h_c, f_s, f_diff, f_disc = cache["h_c"], cache["f_s"], cache["f_diff"], cache["f_disc"]
    masked = dy * h_c
    d_hs = masked * f_disc * f_s * (1.0 - f_s)
    d_disc_pre = (masked * (f_s - f_diff)).sum(axis=1, keepdims=True) * f_disc * (1.0 - f_disc)
    g["w_disc"][:] = cache["h_e"].T @ d_disc_pre
    d_he = -masked * f_disc * f_diff * (1.0 - f_diff) + d_disc_pre @ w["w_disc"].T
    np.add.at(grads.student, cache["student"], d_hs)
    np.add.at(grads.exercise, cache["exercise"], d_he)


def _dina_backward(params, cache, label, live, n, grads):
    p = cache["pred"]
    dp = np.where(live, (p - label) / (p * (1.0 - p)), 0.0) / n
    eta = cache["eta"]
    guess, slip = cache["guess"], cache["slip"]
    d_guess = dp * (1.0 - eta)
    d_slip = -dp * eta
    d_eta = dp * (1.0 - slip - guess)
    d_pre = np.stack(
        [d_guess * 0.5 * cache["sig_g"] * (1.0 - cache["sig_g"]),
         d_slip * 0.5 * cache["sig_s"] * (1.0 - cache["sig_s"])],
        axis=1,
    )
    # d eta / d theta_k = eta * (1 - sigmoid(theta_k)) on the exercise's concepts
    d_theta = (d_eta * eta)[:, None] * cache["h_c"] * (1.0 - sigmoid(cache["theta"]))
    np.add.at(grads.student, cache["student"], d_theta)
    np.add.at(grads.exercise, cache["exercise"], d_pre)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, **kwargs) -> "AdamState":
        arrays = params.arrays()
        return cls(
            m={k: np.zeros_like(a) for k, a in arrays.items()},
            v={k: np.zeros_like(a) for k, a in arrays.items()},
            **kwargs,
        )


def adam_step(state: AdamState, params: ModelParams, grads: ModelParams, clip_fc: bool = False) -> ModelParams:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    With ``clip_fc`` (NCD only) negative FC weights are reset to 0 afterwards.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    grad_arrays = grads.arrays()
    for name, p in params.arrays().items():
        g = grad_arrays[name]
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape or g.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    if clip_fc and params.kind == "ncd":
        for name in FC_NAMES:
            np.maximum(params.diagnostic[name], 0.0, out=params.diagnostic[name])
    return params


# --------------------------------------------------------------------------
# local training


def train_local(
    params: ModelParams,
    dataset: ClientDataset,
    qmatrix: QMatrix,
    epochs: int,
    batch_size: int,
    optimizer: AdamState,
    rng,
    clip_fc: bool = False,
    loss_reduction: str = "mean",
) -> tuple[ModelParams, float]:
    """Mini-batch Adam over the client's training logs.

    ``rng`` is a seed or ``numpy.random.Generator``; passing the client's own
    generator continues its stream across rounds. Returns the parameters
    (updated in place) and the client loss of the final epoch: the mean
    per-example BCE, or the sum with ``loss_reduction="sum"``.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if loss_reduction not in ("mean", "sum"):
        raise ValueError("loss_reduction must be 'mean' or 'sum'")
    train = dataset.train
    n = len(train)
    if n == 0:
        raise ValueError(f"school {dataset.school} has no training logs")
    rng = np.random.default_rng(rng)
    local_student = dataset.local_index(train.student)
    exercise = train.exercise
    label = train.correct.astype(np.float64)
    epoch_loss = 0.0
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            pred, cache = forward(params, qmatrix, local_student[idx], exercise[idx])
            epoch_loss += float(bce_loss(pred, label[idx]).sum())
            grads = backward(params, cache, label[idx])
            adam_step(optimizer, params, grads, clip_fc=clip_fc)
    return params, epoch_loss / n if loss_reduction == "mean" else epoch_loss


# --------------------------------------------------------------------------
# checkpoints
#
# Layout: line 1 is the magic "FEDCD-CKPT 1"; line 2 is a one-line JSON
# header {"kind", "n_students", "n_exercises", "dim", "n_concepts", "meta",
# "blocks": [{"name", "shape"}, ...]}; then each block's float64 data in
# header order, little-endian, C order. Blocks appear in the order student,
# exercise, w_disc, w_fc1, w_fc2, w_fc3 and any may be absent.

CKPT_MAGIC = b"FEDCD-CKPT 1\n"
_BLOCK_ORDER = ("student", "exercise") + DIAGNOSTIC_NAMES


def save_checkpoint(
    path, arrays: Mapping[str, np.ndarray], kind: str, dim: int, n_concepts: int, meta=None
) -> None:
    unknown = set(arrays) - set(_BLOCK_ORDER)
    if unknown:
        raise ValueError(f"unknown blocks {sorted(unknown)}")
    names = [n for n in _BLOCK_ORDER if n in arrays]
    shape_of = {n: list(np.shape(arrays[n])) for n in names}
    header = {
        "kind": kind,
        "n_students": shape_of["student"][0] if "student" in names else 0,
        "n_exercises": shape_of["exercise"][0] if "exercise" in names else 0,
        "dim": dim,
        "n_concepts": n_concepts,
        "meta": meta or {},
        "blocks": [{"name": n, "shape": shape_of[n]} for n in names],
    }
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for n in names:
            f.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        if f.readline() != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        return json.loads(f.readline())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.readline() != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        header = json.loads(f.readline())
        arrays = {}
        for block in header["blocks"]:
            shape = tuple(block["shape"])
            count = int(np.prod(shape))
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated block {block['name']}")
            arrays[block["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return header, arrays


def save_params(path, params: ModelParams, n_concepts: int, meta=None) -> None:
    save_checkpoint(path, params.arrays(), params.kind, params.dim, n_concepts, meta)


def load_params(path) -> ModelParams:
    header, arrays = load_checkpoint(path)
    diagnostic = {k: arrays[k] for k in DIAGNOSTIC_NAMES if k in arrays}
    return ModelParams(header["kind"], arrays["student"], arrays["exercise"], diagnostic)

