"""Federated averaging in an open system where clients join and leave.

One round is ``H`` local-update iterations followed by one communication
iteration. Only *eligible* clients (those holding the latest broadcast) take
local steps and can be averaged. A client that joins is ineligible until the
next broadcast reaches it, so its model enters an average at the earliest two
rounds after it joined (with per-round churn).
"""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ._validation import check_model_vector, check_positive, check_probability
from .objectives import ObjectiveSpec, loss, stochastic_gradient
from .optimizers import AdamState, SgdState, step

OptimizerState = Union[SgdState, AdamState]

RUN_CSV_HEADER = ["run_id", "round", "iterate_norm", "global_loss", "n_clients",
                  "n_eligible", "n_joined", "n_left"]
EVENT_CSV_HEADER = ["run_id", "round", "iteration", "kind", "client_id"]


class ChurnTiming(str, enum.Enum):
    PER_COMMUNICATION_ROUND = "PerCommunicationRound"
    PER_ITERATION = "PerIteration"


class SelectionMode(str, enum.Enum):
    BERNOULLI = "BernoulliSubset"
    WEIGHTED = "WeightedIID"


class ProtocolError(RuntimeError):
    """The open-system protocol reached a state it cannot continue from."""


@dataclass(frozen=True)
class ChurnConfig:
    p_leave: float = 0.0
    p_join: float = 0.0
    max_leave_per_event: int = 1
    max_join_per_event: int = 1
    churn_timing: ChurnTiming = ChurnTiming.PER_COMMUNICATION_ROUND

    def __post_init__(self):
        check_probability(self.p_leave, "p_leave")
        check_probability(self.p_join, "p_join")
        if self.max_leave_per_event < 0 or self.max_join_per_event < 0:
            raise ValueError("per-event churn caps must be non-negative")
        object.__setattr__(self, "churn_timing", ChurnTiming(self.churn_timing))

    @classmethod
    def symmetric(cls, p: float, **kwargs) -> "ChurnConfig":
        return cls(p_leave=p, p_join=p, **kwargs)


@dataclass(frozen=True)
class Schedule:
    local_steps_per_round: int = 5
    total_rounds: int = 200

    def __post_init__(self):
        if self.local_steps_per_round < 1:
            raise ValueError("local_steps_per_round must be >= 1")
        if self.total_rounds < 0:
            raise ValueError("total_rounds must be >= 0")


@dataclass(frozen=True)
class SelectionConfig:
    """How the server weights eligible clients.

    ``BernoulliSubset`` draws ``delta_i ~ Bernoulli(q)``; ``WeightedIID`` calls
    ``weight_sampler(rng, n)`` for ``n`` non-negative i.i.d. weights. Draws
    with all-zero weights are resampled.
    """

    mode: SelectionMode = SelectionMode.BERNOULLI
    q: float = 1.0
    weight_sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", SelectionMode(self.mode))
        if self.mode is SelectionMode.BERNOULLI:
            check_probability(self.q, "q")
            if self.q == 0.0:
                raise ValueError("q must be positive so a non-empty subset can be drawn")
        elif self.weight_sampler is None:
            raise ValueError("WeightedIID selection needs a weight_sampler")


@dataclass(frozen=True)
class LocalConfig:
    """Local optimizer settings shared by every client."""

    optimizer: str = "sgd"
    eta: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-3
    batch_size: int = 1
    reset_moments_on_broadcast: bool = False

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        check_positive(self.eta, "eta")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0")
        # validates Adam hyperparameters eagerly
        self.new_state(np.zeros(1))

    def new_state(self, x) -> OptimizerState:
        if self.optimizer == "adam":
            return AdamState.fresh(x, self.eta, self.beta1, self.beta2, self.epsilon)
        return SgdState(x, self.eta)


@dataclass
class ClientState:
    id: int
    eligible: bool
    optimizer: OptimizerState
    objective: ObjectiveSpec
    joined_at_round: int

    @property
    def model(self) -> np.ndarray:
        return self.optimizer.x

    @property
    def shard(self):
        return self.objective.dataset


@dataclass(frozen=True)
class ChurnEvent:
    round: int
    iteration: int
    kind: str  # join | leave | join_suppressed | leave_suppressed
    client_id: Optional[int]


@dataclass
class Roster:
    active: list
    pool: list
    departed_count: int = 0
    next_id: int = 0
    departed_ids: set = field(default_factory=set)

    def eligible(self) -> list:
        return [c for c in self.active if c.eligible]

    def by_id(self, client_id: int) -> ClientState:
        for c in self.active:
            if c.id == client_id:
                return c
        raise KeyError(client_id)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    iterate_norm: float
    global_loss: float
    n_clients: int
    n_eligible: int
    n_joined: int
    n_left: int
    selected_ids: tuple = ()
    events: tuple = ()
    x_bar: Optional[np.ndarray] = field(default=None, repr=False, compare=False)


@dataclass
class RunRecord:
    run_id: int
    initial_norm: float
    initial_loss: float
    initial_clients: int
    rounds: list = field(default_factory=list)
    events: list = field(default_factory=list)
    final_model: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def iterate_norms(self) -> np.ndarray:
        return np.array([r.iterate_norm for r in self.rounds])

    @property
    def global_losses(self) -> np.ndarray:
        return np.array([r.global_loss for r in self.rounds])

    def csv_rows(self) -> list:
        return [[self.run_id, r.round, repr(r.iterate_norm), repr(r.global_loss), r.n_clients,
                 r.n_eligible, r.n_joined, r.n_left] for r in self.rounds]

    def event_rows(self) -> list:
        return [[self.run_id, e.round, e.iteration, e.kind, "" if e.client_id is None else e.client_id]
                for e in self.events]


def federated_average(models: Sequence, weights: Sequence[float]) -> np.ndarray:
    """``sum_i w_i x_i / sum_i w_i`` for non-negative weights, not all zero."""
    if len(models) == 0:
        raise ValueError("federated_average needs at least one model")
    X = np.vstack([check_model_vector(m, name="model") for m in models])
    w = np.asarray(weights, dtype=float)
    if w.shape != (X.shape[0],):
        raise ValueError("need one weight per model")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("at least one weight must be positive")
    return (w / total) @ X


def select_clients(roster: Roster, cfg: SelectionConfig, rng: np.random.Generator):
    """Draw aggregation weights over eligible clients; return ``(ids, weights)``.

    Only clients with a positive weight are returned.
    """
    eligible = roster.eligible()
    if not eligible:
        raise ProtocolError("no eligible client available for communication")
    n = len(eligible)
    while True:
        if cfg.mode is SelectionMode.BERNOULLI:
            w = (rng.random(n) < cfg.q).astype(float)
        else:
            w = np.asarray(cfg.weight_sampler(rng, n), dtype=float)
            if w.shape != (n,) or np.any(w < 0):
                raise ValueError("weight_sampler must return n non-negative weights")
        if w.sum() > 0:
            break
    keep = w > 0
    ids = [c.id for c, k in zip(eligible, keep) if k]
    return ids, w[keep]


def _admit(roster: Roster, local: LocalConfig, round_index: int, x0) -> ClientState:
    objective = roster.pool.pop(0)
    client = ClientState(
        id=roster.next_id, eligible=False, optimizer=local.new_state(np.array(x0, dtype=float)),
        objective=objective, joined_at_round=round_index,
    )
    roster.next_id += 1
    roster.active.append(client)
    return client


def apply_churn(roster: Roster, cfg: ChurnConfig, round_index: int, rng: np.random.Generator,
                local: Optional[LocalConfig] = None, iteration: int = 0):
    """One churn event: departures first, then arrivals from the pool.

    A departure that would leave no eligible client is suppressed and logged.
    Returns ``(roster, events)``; the roster is updated in place.
    """
    events = []
    if roster.active and rng.random() < cfg.p_leave:
        k = min(cfg.max_leave_per_event, len(roster.active))
        picks = rng.choice(len(roster.active), size=k, replace=False) if k else []
        leaving = [roster.active[i] for i in picks]
        for client in leaving:
            n_eligible = sum(c.eligible for c in roster.active)
            if len(roster.active) == 1 or (client.eligible and n_eligible == 1):
                events.append(ChurnEvent(round_index, iteration, "leave_suppressed", client.id))
                continue
            roster.active.remove(client)
            roster.departed_ids.add(client.id)
            roster.departed_count += 1
            events.append(ChurnEvent(round_index, iteration, "leave", client.id))
    if rng.random() < cfg.p_join:
        for _ in range(cfg.max_join_per_event):
            if not roster.pool:
                events.append(ChurnEvent(round_index, iteration, "join_suppressed", None))
                continue
            client = _admit(roster, local or LocalConfig(), round_index, np.zeros(roster.pool[0].d))
            events.append(ChurnEvent(round_index, iteration, "join", client.id))
    return roster, events


def global_loss(roster: Roster, x) -> float:
    """Mean of the active clients' local losses at ``x``."""
    return float(np.mean([loss(c.objective, x) for c in roster.active]))


def run_round(roster: Roster, schedule: Schedule, selection: SelectionConfig, churn: ChurnConfig,
              local: LocalConfig, rng: np.random.Generator, round_index: int = 0):
    """Execute one round and return ``(roster, RoundRecord)``; the roster is updated in place."""
    per_iteration = churn.churn_timing is ChurnTiming.PER_ITERATION
    events = []
    iteration = 0
    for _ in range(schedule.local_steps_per_round):
        for client in roster.active:
            if client.eligible:
                g = stochastic_gradient(client.objective, client.model, local.batch_size, rng)
                client.optimizer = step(client.optimizer, g)
        if per_iteration:
            events += apply_churn(roster, churn, round_index, rng, local, iteration)[1]
        iteration += 1

    ids, weights = select_clients(roster, selection, rng)
    selected = [roster.by_id(i) for i in ids]
    assert all(c.eligible for c in selected), "ineligible client selected for averaging"
    x_bar = federated_average([c.model for c in selected], weights)
    n_clients, n_eligible = len(roster.active), len(roster.eligible())
    for client in roster.active:
        opt = client.optimizer.with_x(x_bar.copy())
        if local.reset_moments_on_broadcast and isinstance(opt, AdamState):
            opt = opt.reset_moments()
        client.optimizer = opt
        client.eligible = True
    g_loss = global_loss(roster, x_bar)

    events += apply_churn(roster, churn, round_index, rng, local, iteration)[1]
    record = RoundRecord(
        round=round_index,
        iterate_norm=float(np.linalg.norm(x_bar)),
        global_loss=g_loss,
        n_clients=n_clients,
        n_eligible=n_eligible,
        n_joined=sum(e.kind == "join" for e in events),
        n_left=sum(e.kind == "leave" for e in events),
        selected_ids=tuple(ids),
        events=tuple(events),
        x_bar=x_bar,
    )
    return roster, record


def make_roster(initial: Sequence[ObjectiveSpec], pool: Sequence[ObjectiveSpec],
                local: LocalConfig, x0=None) -> Roster:
    """Roster whose initial clients all hold ``x0`` and are eligible."""
    if not initial:
        raise ValueError("need at least one initial client")
    d = initial[0].d
    x0 = np.zeros(d) if x0 is None else check_model_vector(x0, d, name="x0")
    active = [ClientState(i, True, local.new_state(x0.copy()), obj, 0) for i, obj in enumerate(initial)]
    return Roster(active=active, pool=list(pool), next_id=len(active))


def run_experiment(initial: Sequence[ObjectiveSpec], pool: Sequence[ObjectiveSpec],
                   local: LocalConfig, schedule: Schedule, selection: SelectionConfig,
                   churn: ChurnConfig, rng: np.random.Generator, x0=None, run_id: int = 0) -> RunRecord:
    """Run ``schedule.total_rounds`` rounds; deterministic given ``rng``'s state."""
    roster = make_roster(initial, pool, local, x0)
    x_init = roster.active[0].model
    record = RunRecord(
        run_id=run_id,
        initial_norm=float(np.linalg.norm(x_init)),
        initial_loss=global_loss(roster, x_init),
        initial_clients=len(roster.active),
        final_model=x_init.copy(),
    )
    for k in range(schedule.total_rounds):
        roster, rec = run_round(roster, schedule, selection, churn, local, rng, k)
        record.rounds.append(rec)
        record.events.extend(rec.events)
        record.final_model = rec.x_bar
    return record


def write_run_csv(records: Sequence[RunRecord], path) -> str:
    path = os.fspath(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(RUN_CSV_HEADER)
            for rec in records:
                writer.writerows(rec.csv_rows())
    except OSError as exc:
        raise OSError(f"cannot write run CSV {path!r}: {exc}") from exc
    return path


def write_events_csv(records: Sequence[RunRecord], path) -> str:
    path = os.fspath(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(EVENT_CSV_HEADER)
            for rec in records:
                writer.writerows(rec.event_rows())
    except OSError as exc:
        raise OSError(f"cannot write events CSV {path!r}: {exc}") from exc
    return path


def read_run_csv(path) -> dict:
    """Parse a run CSV into ``{run_id: {column: array}}``."""
    out: dict = {}
    with open(os.fspath(path), newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RUN_CSV_HEADER:
            raise ValueError(f"unexpected run CSV header {reader.fieldnames}")
        for row in reader:
            cols = out.setdefault(int(row["run_id"]), {k: [] for k in RUN_CSV_HEADER[1:]})
            for k in RUN_CSV_HEADER[1:]:
                cols[k].append(float(row[k]))
    return {rid: {k: np.asarray(v) for k, v in cols.items()} for rid, cols in out.items()}
