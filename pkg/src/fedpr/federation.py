"""Synchronous federated training with a shared/personalized parameter split.

Each round the server selects clients, every selected client loads the
global shared parameters, trains its personalized parameters (shared
frozen), then its shared parameters (personalized frozen), and uploads a
copy of the shared parameters only.  The server averages the uploads in
ascending client-id order and broadcasts the result.

Nothing but the shared-parameter snapshot and scalar loss sums ever
crosses the client boundary; personalized parameters and raw samples stay
local.  The final state is invariant to how clients are scheduled within
a round: per-client rng streams are independent and the merge order is
fixed.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .autodiff import Tensor, backward, sgd_step, zero_grads
from .errors import AggregationError, ConfigError, PartitionError
from .metrics import EvalResult, evaluate_model
from .model import (
    Batch,
    ForgeryModel,
    LossWeights,
    forward_mixed,
    loss_adversarial,
    loss_personalized,
    loss_shared,
    total_loss,
)
from .synthdata import ClientData, batches

Array = np.ndarray

THREADS_ENV = "FEDPR_THREADS"


@dataclass(frozen=True)
class PartitionedParams:
    """Disjoint, complete split of parameter names into shared and personalized."""

    shared: frozenset[str]
    personalized: frozenset[str]

    @classmethod
    def default_for(cls, model: ForgeryModel) -> "PartitionedParams":
        names = set(model.params)
        personal = frozenset(n for n in names if n.startswith("fp."))
        return cls(shared=frozenset(names - personal), personalized=personal)

    @classmethod
    def all_shared(cls, model: ForgeryModel) -> "PartitionedParams":
        return cls(shared=frozenset(model.params), personalized=frozenset())

    def validate_against(self, model: ForgeryModel) -> None:
        names = set(model.params)
        if self.shared & self.personalized:
            raise PartitionError(f"overlapping partition: {sorted(self.shared & self.personalized)}")
        if self.shared | self.personalized != names:
            missing = names - (self.shared | self.personalized)
            extra = (self.shared | self.personalized) - names
            raise PartitionError(f"partition incomplete: missing {sorted(missing)}, extra {sorted(extra)}")


@dataclass
class RoundConfig:
    """Knobs of the federated schedule.

    ``None`` step counts mean one full pass over the client's training
    data per phase (ceil(|train| / batch_size) steps), resolved per client.
    """

    rounds: int = 30
    selection_fraction: float = 1.0
    local_personal_steps: int | None = None
    local_shared_steps: int | None = None
    lr: float = 0.01
    momentum: float = 0.5
    batch_size: int = 16
    weights: LossWeights = field(default_factory=LossWeights)
    force_lambda: float | None = None
    # Aggregate as the literal selection_fraction * sum instead of the mean.
    literal_weighted_sum: bool = False

    def validate(self) -> None:
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if not 0.0 < self.selection_fraction <= 1.0:
            raise ConfigError(f"selection_fraction must lie in (0, 1], got {self.selection_fraction}")
        for steps in (self.local_personal_steps, self.local_shared_steps):
            if steps is not None and steps < 0:
                raise ConfigError(f"local step counts must be >= 0, got {steps}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")


@dataclass
class ClientState:
    """One federated participant; owns its model, data and rng stream."""

    client_id: int
    model: ForgeryModel
    dataset: ClientData
    rng: np.random.Generator
    partition: PartitionedParams

    def __post_init__(self):
        self.partition.validate_against(self.model)

    def shared_snapshot(self) -> dict[str, Array]:
        return {
            name: p.value.data.copy()
            for name, p in self.model.params.items()
            if name in self.partition.shared
        }


@dataclass
class ClientRoundResult:
    """Everything a client sends back: the shared update plus scalar loss sums."""

    client_id: int
    shared_update: dict[str, Array]
    loss_sums: dict[str, float]
    step_count: int


@dataclass
class RoundReport:
    """Server-side record of one communication round."""

    round_index: int
    mean_total_loss: float
    mean_loss_personalized: float
    mean_loss_shared: float
    mean_loss_adversarial: float
    client_evals: dict[int, EvalResult]
    wall_clock_ms: float


def select_clients(
    round_index: int, num_clients: int, fraction: float, server_rng: np.random.Generator
) -> list[int]:
    """ceil(fraction * K) distinct ids, uniform without replacement, sorted."""
    if num_clients <= 0:
        raise ConfigError(f"cannot select from {num_clients} clients")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"selection fraction must lie in (0, 1], got {fraction}")
    count = max(1, math.ceil(fraction * num_clients - 1e-9))
    chosen = server_rng.choice(num_clients, size=count, replace=False)
    return sorted(int(i) for i in chosen)


def _cycling_batches(
    dataset, batch_size: int, rng: np.random.Generator
) -> Iterator[Batch]:
    if len(dataset) < batch_size:
        raise ConfigError(
            f"batch_size {batch_size} exceeds client dataset size {len(dataset)}"
        )
    while True:
        yield from batches(dataset, batch_size, rng)


def _train_phase(
    client: ClientState,
    batch_iter: Iterator[Batch],
    trainable_names: frozenset[str],
    steps: int,
    cfg: RoundConfig,
    loss_sums: dict[str, float],
) -> None:
    model = client.model
    trainable = [p for name, p in model.params.items() if name in trainable_names]
    all_params = model.named_params()
    need_shared_branch = cfg.weights.gamma > 0 or cfg.weights.alpha > 0
    # When no trunk parameter trains this phase, its backward sweep can be
    # skipped; the gradients of the trained parameters are unchanged.
    freeze_trunk = not any(name.startswith("ff.") for name in trainable_names)
    zero_tensor = Tensor(0.0)
    for _ in range(steps):
        batch = next(batch_iter)
        out = forward_mixed(
            model,
            batch,
            client.rng,
            force_lambda=cfg.force_lambda,
            compute_shared=need_shared_branch,
            freeze_trunk=freeze_trunk,
        )
        lp = loss_personalized(out.log_probs_p, batch.labels)
        if need_shared_branch:
            ls = loss_shared(out.log_probs_s, batch.labels[out.pair_index])
            ladv = loss_adversarial(out.log_probs_s_adv)
        else:
            ls = ladv = zero_tensor
        loss = total_loss(lp, ls, ladv, cfg.weights)

        zero_grads(all_params)
        backward(loss)
        sgd_step(trainable, cfg.lr, cfg.momentum)

        loss_sums["total"] += loss.item()
        loss_sums["personalized"] += lp.item()
        loss_sums["shared"] += ls.item()
        loss_sums["adversarial"] += ladv.item()


def client_round(
    client: ClientState, theta_s_global: Mapping[str, Array], cfg: RoundConfig
) -> ClientRoundResult:
    """One local round: load shared, train personalized, train shared, upload shared."""
    cfg.validate()
    if set(theta_s_global) != set(client.partition.shared):
        raise PartitionError(
            f"global snapshot names {sorted(theta_s_global)} do not match "
            f"shared partition {sorted(client.partition.shared)}"
        )
    load_shared(client, theta_s_global)

    epoch_steps = math.ceil(len(client.dataset.train) / cfg.batch_size)
    personal_steps = (
        cfg.local_personal_steps if cfg.local_personal_steps is not None else epoch_steps
    )
    shared_steps = cfg.local_shared_steps if cfg.local_shared_steps is not None else epoch_steps

    loss_sums = {"total": 0.0, "personalized": 0.0, "shared": 0.0, "adversarial": 0.0}
    steps = 0
    batch_iter = _cycling_batches(client.dataset.train, cfg.batch_size, client.rng)
    if client.partition.personalized and personal_steps > 0:
        _train_phase(
            client, batch_iter, client.partition.personalized, personal_steps, cfg, loss_sums
        )
        steps += personal_steps
    if client.partition.shared and shared_steps > 0:
        _train_phase(
            client, batch_iter, client.partition.shared, shared_steps, cfg, loss_sums
        )
        steps += shared_steps

    return ClientRoundResult(
        client_id=client.client_id,
        shared_update=client.shared_snapshot(),
        loss_sums=loss_sums,
        step_count=steps,
    )


def load_shared(client: ClientState, theta_s: Mapping[str, Array]) -> None:
    for name, value in theta_s.items():
        param = client.model.params.get(name)
        if param is None or param.value.data.shape != value.shape:
            raise PartitionError(f"cannot load shared parameter {name!r}")
        param.value.data[...] = value


def aggregate(
    updates: Sequence[Mapping[str, Array]], coefficient: float | None = None
) -> dict[str, Array]:
    """Per-parameter combination of the uploads, in the order given.

    With ``coefficient=None`` this is the arithmetic mean; otherwise the
    result is coefficient * sum (the literal form of the update rule).
    """
    if not updates:
        raise AggregationError("no updates to aggregate")
    names = list(updates[0])
    for i, upd in enumerate(updates[1:], start=1):
        if set(upd) != set(names):
            raise AggregationError(f"update {i} has mismatched parameter names")
    out: dict[str, Array] = {}
    for name in names:
        shape = updates[0][name].shape
        acc = np.zeros(shape)
        for i, upd in enumerate(updates):
            if upd[name].shape != shape:
                raise AggregationError(
                    f"update {i} has shape {upd[name].shape} for {name!r}, expected {shape}"
                )
            acc += upd[name]
        out[name] = acc * coefficient if coefficient is not None else acc / len(updates)
    return out


def _worker_count(n_tasks: int, n_workers: int | None) -> int:
    if n_workers is None:
        env = os.environ.get(THREADS_ENV, "")
        n_workers = int(env) if env.strip() else (os.cpu_count() or 1)
    return max(1, min(n_workers, n_tasks))


def run_federation(
    clients: Sequence[ClientState],
    cfg: RoundConfig,
    server_rng: np.random.Generator,
    n_workers: int | None = None,
    message_sink: Callable[[int, int, ClientRoundResult], None] | None = None,
    start_round: int = 0,
) -> list[RoundReport]:
    """Run ``cfg.rounds`` rounds of select / local train / aggregate / broadcast.

    ``message_sink(round, client_id, result)`` observes every client-to-
    server message, in ascending client-id order, for auditing.  Worker
    count comes from ``n_workers``, else the FEDPR_THREADS environment
    variable, else the available parallelism; results are identical for
    any worker count.
    """
    cfg.validate()
    if not clients:
        raise ConfigError("no clients")
    partition = clients[0].partition
    for c in clients:
        if c.partition != partition:
            raise PartitionError("all clients must share one partition scheme")

    history: list[RoundReport] = []
    theta_s = clients[0].shared_snapshot()
    for t in range(start_round, start_round + cfg.rounds):
        started = time.perf_counter()
        selected = select_clients(t, len(clients), cfg.selection_fraction, server_rng)
        workers = _worker_count(len(selected), n_workers)
        if workers == 1:
            results = [client_round(clients[i], theta_s, cfg) for i in selected]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(
                    pool.map(lambda i: client_round(clients[i], theta_s, cfg), selected)
                )
        if message_sink is not None:
            for res in results:
                message_sink(t, res.client_id, res)

        coefficient = cfg.selection_fraction if cfg.literal_weighted_sum else None
        theta_s = aggregate([res.shared_update for res in results], coefficient)
        for c in clients:
            load_shared(c, theta_s)

        total_steps = sum(res.step_count for res in results)
        sums = {key: sum(res.loss_sums[key] for res in results) for key in results[0].loss_sums}
        evals = {c.client_id: evaluate_model(c.model, c.dataset.test) for c in clients}
        history.append(
            RoundReport(
                round_index=t,
                mean_total_loss=sums["total"] / max(total_steps, 1),
                mean_loss_personalized=sums["personalized"] / max(total_steps, 1),
                mean_loss_shared=sums["shared"] / max(total_steps, 1),
                mean_loss_adversarial=sums["adversarial"] / max(total_steps, 1),
                client_evals=evals,
                wall_clock_ms=(time.perf_counter() - started) * 1000.0,
            )
        )
    return history
