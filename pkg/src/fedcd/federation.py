"""Federated training of cognitive-diagnosis models.

Every round: the server broadcasts its shared blocks, each client trains
locally, uploads its (optionally Laplace-noised) exercise block and its
training loss, and the server aggregates the uploads with an
:data:`AggregationStrategy`.

Which blocks are shared depends on the personalization mode:

========  ==================================================
full      exercise only; student + diagnostic stay private
no_pdp    exercise + diagnostic; student stays private
none      everything (plain FedAvg-style global model)
========  ==================================================

In ``none`` mode a student row is only ever trained by the school that owns
it, so the server takes each row from its owner instead of averaging.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import models
from .data import ClientDataset, QMatrix, pool_clients
from .models import AdamState, ModelParams

PERSONALIZATION_MODES = ("full", "no_pdp", "none")

# RNG stream keys, combined with the run seed and school index
_INIT_STREAM = 0
_TRAIN_STREAM = 1
_NOISE_STREAM = 2


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


# --------------------------------------------------------------------------
# aggregation strategies


@dataclass(frozen=True)
class FairnessSoftmax:
    """Softmax of ``gamma``-scaled client losses: worse-fit clients weigh more."""

    gamma: float = 0.1
    name = "fairness_softmax"


@dataclass(frozen=True)
class UniformAverage:
    name = "uniform"


@dataclass(frozen=True)
class DataSizeAverage:
    name = "data_size"


@dataclass(frozen=True)
class AttentionDistance:
    """Softmax over negative distance to the previous global exercise block.

    A simple stand-in for attention-style aggregation; ``step`` scales the
    move from the previous global value towards the weighted average.
    """

    step: float = 1.0
    name = "attention"


AggregationStrategy = Union[FairnessSoftmax, UniformAverage, DataSizeAverage, AttentionDistance]

_STRATEGIES = {
    "fairness_softmax": FairnessSoftmax,
    "uniform": UniformAverage,
    "data_size": DataSizeAverage,
    "attention": AttentionDistance,
}


def make_strategy(name: str, gamma: float = 0.1, step: float = 1.0) -> AggregationStrategy:
    if name == "fairness_softmax":
        return FairnessSoftmax(gamma)
    if name == "attention":
        return AttentionDistance(step)
    if name in _STRATEGIES:
        return _STRATEGIES[name]()
    raise ValueError(f"unknown aggregator {name!r}; choose from {sorted(_STRATEGIES)}")


def _softmax(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max())
    # fsum makes the normalizer independent of client order
    return e / math.fsum(e.tolist())


def compute_weights(
    strategy: AggregationStrategy,
    losses: Sequence[float],
    data_sizes: Sequence[int] | None = None,
    uploads: Sequence[np.ndarray] | None = None,
    previous_global: np.ndarray | None = None,
) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or len(losses) == 0:
        raise ValueError("need a non-empty list of client losses")
    if not np.all(np.isfinite(losses)):
        raise ValueError(f"non-finite client loss in {losses.tolist()}")
    T = len(losses)
    if isinstance(strategy, FairnessSoftmax):
        return _softmax(strategy.gamma * losses)
    if isinstance(strategy, UniformAverage):
        return np.full(T, 1.0 / T)
    if isinstance(strategy, DataSizeAverage):
        if data_sizes is None or len(data_sizes) != T:
            raise ValueError("data_size weighting needs one size per client")
        sizes = np.asarray(data_sizes, dtype=np.float64)
        if np.any(sizes < 0) or sizes.sum() <= 0:
            raise ValueError("data sizes must be non-negative with a positive total")
        return sizes / math.fsum(sizes.tolist())
    if isinstance(strategy, AttentionDistance):
        if uploads is None or previous_global is None or len(uploads) != T:
            raise ValueError("attention weighting needs the uploads and the previous global block")
        dist = np.array([np.linalg.norm(u - previous_global) for u in uploads])
        return _softmax(-dist)
    raise TypeError(f"unknown aggregation strategy {strategy!r}")


# --------------------------------------------------------------------------
# configuration and state


@dataclass(frozen=True)
class StrategyConfig:
    personalization: str = "full"
    aggregator: AggregationStrategy = field(default_factory=FairnessSoftmax)
    dp_scale: float = 0.0

    def __post_init__(self):
        if self.personalization not in PERSONALIZATION_MODES:
            raise ValueError(f"personalization must be one of {PERSONALIZATION_MODES}")
        if not (math.isfinite(self.dp_scale) and self.dp_scale >= 0):
            raise ValueError("dp_scale must be finite and >= 0")

    @property
    def shared_blocks(self) -> tuple[str, ...]:
        return {
            "full": ("exercise",),
            "no_pdp": ("exercise", "diagnostic"),
            "none": ("exercise", "diagnostic", "student"),
        }[self.personalization]


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "ncd"
    learning_rate: float = 0.001
    clip_fc: bool = False
    loss_reduction: str = "mean"

    def __post_init__(self):
        if self.kind not in models.MODEL_KINDS:
            raise ValueError(f"model kind must be one of {models.MODEL_KINDS}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError("loss_reduction must be 'mean' or 'sum'")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class ClientState:
    school: int
    params: ModelParams
    optimizer: AdamState
    dataset: ClientDataset
    rng: np.random.Generator
    noise_rng: np.random.Generator


@dataclass(frozen=True)
class ClientUpload:
    """What a client sends to the server.

    ``diagnostic`` and ``student`` are only filled in the modes that share
    them; in ``full`` mode the upload carries the exercise block alone.
    """

    school: int
    exercise: np.ndarray
    client_loss: float
    num_samples: int
    diagnostic: dict | None = None
    student: tuple[np.ndarray, np.ndarray] | None = None  # (global ids, rows)


@dataclass
class ServerState:
    kind: str
    n_concepts: int
    strategy: AggregationStrategy
    global_exercise: np.ndarray
    previous_global: np.ndarray
    round: int = 0
    global_diagnostic: dict | None = None
    global_student: np.ndarray | None = None
    last_weights: np.ndarray | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        """Everything the server stores, by block name."""
        out = {"exercise": self.global_exercise}
        if self.global_diagnostic is not None:
            out.update(self.global_diagnostic)
        if self.global_student is not None:
            out["student"] = self.global_student
        return out

    def save(self, path) -> None:
        dim = self.global_exercise.shape[1] if self.kind == "ncd" else self.n_concepts
        models.save_checkpoint(
            path, self.arrays(), self.kind, dim, self.n_concepts,
            meta={"role": "server", "round": self.round},
        )


def apply_dp_noise(block: np.ndarray, delta: float, rng) -> np.ndarray:
    """Add i.i.d. Laplace(0, delta) noise; ``delta == 0`` returns an exact copy."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    block = np.array(block, dtype=np.float64, copy=True)
    if delta == 0:
        return block
    return block + np.random.default_rng(rng).laplace(0.0, delta, size=block.shape)


# --------------------------------------------------------------------------
# protocol steps


def init_state(
    datasets: Sequence[ClientDataset],
    qmatrix: QMatrix,
    config: StrategyConfig,
    seed: int,
    model: ModelConfig = ModelConfig(),
) -> tuple[ServerState, list[ClientState]]:
    """Randomly initialize one global model and hand every client its copy."""
    n_students = 1 + max(int(d.students.max()) for d in datasets if len(d.students))
    template = models.init_params(
        model.kind, n_students, qmatrix.num_exercises, qmatrix.num_concepts,
        rng_stream(seed, _INIT_STREAM),
    )
    server = ServerState(
        kind=model.kind,
        n_concepts=qmatrix.num_concepts,
        strategy=config.aggregator,
        global_exercise=template.exercise.copy(),
        previous_global=template.exercise.copy(),
        global_diagnostic=(
            {k: v.copy() for k, v in template.diagnostic.items()}
            if "diagnostic" in config.shared_blocks else None
        ),
        global_student=template.student.copy() if "student" in config.shared_blocks else None,
    )
    clients = []
    for d in datasets:
        params = ModelParams(
            model.kind,
            template.student[d.students].copy(),
            template.exercise.copy(),
            {k: v.copy() for k, v in template.diagnostic.items()},
        )
        clients.append(
            ClientState(
                school=d.school,
                params=params,
                optimizer=AdamState.for_params(params, learning_rate=model.learning_rate),
                dataset=d,
                rng=rng_stream(seed, _TRAIN_STREAM, d.school),
                noise_rng=rng_stream(seed, _NOISE_STREAM, d.school),
            )
        )
    return server, clients


def broadcast(server: ServerState, client: ClientState) -> None:
    """Overwrite the client's shared blocks with the server's global values."""
    client.params.exercise[...] = server.global_exercise
    if server.global_diagnostic is not None:
        for k, v in server.global_diagnostic.items():
            client.params.diagnostic[k][...] = v
    if server.global_student is not None:
        client.params.student[...] = server.global_student[client.dataset.students]


def client_update(
    client: ClientState,
    qmatrix: QMatrix,
    config: StrategyConfig,
    model: ModelConfig,
    epochs: int,
    batch_size: int,
) -> ClientUpload:
    _, loss = models.train_local(
        client.params, client.dataset, qmatrix, epochs, batch_size, client.optimizer,
        client.rng, clip_fc=model.clip_fc, loss_reduction=model.loss_reduction,
    )
    shared = config.shared_blocks
    return ClientUpload(
        school=client.school,
        exercise=apply_dp_noise(client.params.exercise, config.dp_scale, client.noise_rng),
        client_loss=loss,
        num_samples=len(client.dataset.train),
        diagnostic=(
            {k: v.copy() for k, v in client.params.diagnostic.items()}
            if "diagnostic" in shared else None
        ),
        student=(
            (client.dataset.students, client.params.student.copy())
            if "student" in shared else None
        ),
    )


def aggregate(server: ServerState, uploads: Sequence[ClientUpload]) -> ServerState:
    """Combine one upload per school into new global blocks (in place)."""
    if not uploads:
        raise ValueError("no uploads to aggregate")
    schools = [u.school for u in uploads]
    if len(set(schools)) != len(schools):
        raise ValueError("more than one upload from the same school")
    shape = server.global_exercise.shape
    for u in uploads:
        if u.exercise.shape != shape:
            raise ValueError(f"school {u.school} uploaded shape {u.exercise.shape}, expected {shape}")
    blocks = [u.exercise for u in uploads]
    weights = compute_weights(
        server.strategy,
        [u.client_loss for u in uploads],
        [u.num_samples for u in uploads],
        blocks,
        server.global_exercise,
    )
    step = server.strategy.step if isinstance(server.strategy, AttentionDistance) else 1.0

    def combine(prev, arrays):
        avg = sum(w * a for w, a in zip(weights, arrays))
        return avg if step == 1.0 else prev + step * (avg - prev)

    new_exercise = combine(server.global_exercise, blocks)
    if server.global_diagnostic is not None:
        server.global_diagnostic = {
            k: combine(v, [u.diagnostic[k] for u in uploads])
            for k, v in server.global_diagnostic.items()
        }
    if server.global_student is not None:
        for u in uploads:
            ids, rows = u.student
            server.global_student[ids] = rows
    server.previous_global = server.global_exercise
    server.global_exercise = new_exercise
    server.last_weights = weights
    server.round += 1
    return server


@dataclass
class RoundResult:
    losses: list[float]
    weights: list[float]


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    qmatrix: QMatrix,
    config: StrategyConfig,
    epochs: int,
    batch_size: int,
    model: ModelConfig = ModelConfig(),
    executor: ThreadPoolExecutor | None = None,
) -> RoundResult:
    """Broadcast, train every client, aggregate. Mutates server and clients."""

    def work(client):
        broadcast(server, client)
        return client_update(client, qmatrix, config, model, epochs, batch_size)

    if executor is None:
        uploads = [work(c) for c in clients]
    else:
        uploads = list(executor.map(work, clients))
    aggregate(server, uploads)
    return RoundResult([u.client_loss for u in uploads], server.last_weights.tolist())


@dataclass
class ProtocolResult:
    server: ServerState
    clients: list[ClientState]
    trace: list[tuple[int, int, float, float]]  # (round, school, client_loss, weight)

    def loss_by_round(self) -> np.ndarray:
        rounds = sorted({r for r, *_ in self.trace})
        return np.array([
            np.mean([loss for r2, _, loss, _ in self.trace if r2 == r]) for r in rounds
        ])


def run_protocol(
    datasets: Sequence[ClientDataset],
    qmatrix: QMatrix,
    config: StrategyConfig,
    rounds: int = 100,
    epochs: int = 5,
    batch_size: int = 128,
    seed: int = 0,
    model: ModelConfig = ModelConfig(),
    workers: int = 1,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
) -> ProtocolResult:
    """Run the full federated protocol for ``rounds`` rounds.

    With ``workers > 1`` clients train on a thread pool; results are
    identical to sequential execution. After the last round every client
    receives the final broadcast, so the returned clients hold the models
    that would be deployed. Checkpoints (when ``checkpoint_every > 0``) go to
    ``checkpoint_dir/round_XXX/{server,client_T}.ckpt``.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    server, clients = init_state(datasets, qmatrix, config, seed, model)
    trace = []
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for _ in range(rounds):
            result = run_round(server, clients, qmatrix, config, epochs, batch_size, model, executor)
            for c, loss, w in zip(clients, result.losses, result.weights):
                trace.append((server.round, c.school, loss, w))
            if checkpoint_every and server.round % checkpoint_every == 0:
                save_round_checkpoints(checkpoint_dir, server, clients, qmatrix)
    finally:
        if executor is not None:
            executor.shutdown()
    for c in clients:
        broadcast(server, c)
    return ProtocolResult(server, clients, trace)


def save_round_checkpoints(directory, server: ServerState, clients, qmatrix: QMatrix) -> Path:
    if directory is None:
        raise ValueError("checkpointing needs a directory")
    out = Path(directory) / f"round_{server.round:03d}"
    out.mkdir(parents=True, exist_ok=True)
    server.save(out / "server.ckpt")
    for c in clients:
        models.save_params(
            out / f"client_{c.school}.ckpt", c.params, qmatrix.num_concepts,
            meta={"role": "client", "school": c.school, "round": server.round},
        )
    return out


def run_centralized(
    dataset: ClientDataset | Sequence[ClientDataset],
    qmatrix: QMatrix,
    epochs: int,
    batch_size: int = 128,
    seed: int = 0,
    model: ModelConfig = ModelConfig(),
) -> ClientState:
    """Train one model on the pooled data, with no federation at all.

    Uses the same initialization and shuffling streams as a one-client
    protocol run, so a single round of :func:`run_protocol` on the pooled
    data reproduces it exactly.
    """
    if not isinstance(dataset, ClientDataset):
        dataset = pool_clients(dataset)
    _, (client,) = init_state([dataset], qmatrix, StrategyConfig(), seed, model)
    models.train_local(
        client.params, dataset, qmatrix, epochs, batch_size, client.optimizer, client.rng,
        clip_fc=model.clip_fc, loss_reduction=model.loss_reduction,
    )
    return client
