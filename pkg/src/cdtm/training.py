"""Joint multi-domain training.

Each step draws one minibatch from one domain, builds that domain's graph and
updates that domain's parameters plus the shared-table rows the batch touched.
Embedding tables use lazy Adam: rows with no gradient keep both their values
and their moments.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .errors import TrainingError
from .model import DomainModel, SharedEmbedding, auxiliary_loss, forward, name_key, prediction_loss
from .synth import Dataset, stream

log = logging.getLogger(__name__)

SCHEDULES = ("proportional", "round_robin")
TABLE_PARAMS = ("W", "W_g")

_STREAM_SCHEDULE = 20
_STREAM_EPOCH = 21


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 256
    steps: int = 2000
    lam: float = 1e-4
    alphas: dict[str, float] = field(default_factory=dict)
    scheduling: str = "proportional"
    seed: int = 0
    aux_full_gradient: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if any(a < 0 for a in self.alphas.values()):
            raise ValueError("alphas must be >= 0")
        if self.scheduling not in SCHEDULES:
            raise ValueError(f"scheduling must be one of {SCHEDULES}")

    def alpha(self, model: DomainModel) -> float:
        return float(self.alphas.get(model.name, model.spec.alpha))


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class TrainState:
    step: int = 0
    batches_seen: dict[str, int] = field(default_factory=dict)
    slots: dict[str, AdamSlot] = field(default_factory=dict)
    # (step, domain, prediction loss, auxiliary loss, mean alignment distance)
    history: list[tuple[int, str, float, float, float]] = field(default_factory=list)

    def domain_history(self, name: str) -> list[tuple[int, str, float, float, float]]:
        return [h for h in self.history if h[1] == name]


def adam_step(param: np.ndarray, grad: np.ndarray, slot: AdamSlot, cfg: TrainConfig,
              rows: np.ndarray | None = None) -> None:
    """In-place Adam update with bias correction; ``rows`` restricts it to table rows."""
    slot.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** slot.t
    c2 = 1.0 - b2 ** slot.t
    if rows is None:
        slot.m *= b1
        slot.m += (1.0 - b1) * grad
        slot.v *= b2
        slot.v += (1.0 - b2) * grad * grad
        param -= cfg.learning_rate * (slot.m / c1) / (np.sqrt(slot.v / c2) + cfg.epsilon)
        return
    g = grad[rows]
    m = b1 * slot.m[rows] + (1.0 - b1) * g
    v = b2 * slot.v[rows] + (1.0 - b2) * g * g
    slot.m[rows] = m
    slot.v[rows] = v
    param[rows] -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)


def touched_rows(grad: np.ndarray) -> np.ndarray:
    return np.flatnonzero(np.any(grad != 0.0, axis=1))


class BatchScheduler:
    """Deterministic (domain, row indices) stream.

    The draw at step ``t`` depends only on ``(seed, t)`` and each domain's
    batch counter, so a scheduler rebuilt from a saved state continues the
    same stream. Domains are handled in sorted-name order, which makes the
    stream independent of how the caller orders them.
    """

    def __init__(self, sizes: dict[str, int], batch_size: int, scheduling: str, seed: int,
                 step: int = 0, batches_seen: dict[str, int] | None = None):
        if not sizes or any(n < 1 for n in sizes.values()):
            raise ValueError("every scheduled dataset must be nonempty")
        self.names = sorted(sizes)
        self.sizes = dict(sizes)
        self.batch_size = batch_size
        self.scheduling = scheduling
        self.seed = seed
        self.step = step
        self.batches_seen = {n: 0 for n in self.names}
        self.batches_seen.update(batches_seen or {})
        total = sum(self.sizes[n] for n in self.names)
        self._cum = np.cumsum([self.sizes[n] / total for n in self.names])
        self._perm_cache: dict[str, tuple[int, np.ndarray]] = {}

    def pick_domain(self, step: int) -> str:
        if self.scheduling == "round_robin":
            return self.names[step % len(self.names)]
        u = stream(self.seed, _STREAM_SCHEDULE, step).random()
        return self.names[min(int(np.searchsorted(self._cum, u, side="right")), len(self.names) - 1)]

    def rows_for(self, name: str, count: int) -> np.ndarray:
        n = self.sizes[name]
        per_epoch = math.ceil(n / self.batch_size)
        epoch, b = divmod(count, per_epoch)
        cached = self._perm_cache.get(name)
        if cached is None or cached[0] != epoch:
            perm = stream(self.seed, _STREAM_EPOCH, name_key(name), epoch).permutation(n)
            self._perm_cache[name] = cached = (epoch, perm)
        return cached[1][b * self.batch_size:(b + 1) * self.batch_size]

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return self

    def __next__(self) -> tuple[str, np.ndarray]:
        name = self.pick_domain(self.step)
        rows = self.rows_for(name, self.batches_seen[name])
        self.batches_seen[name] += 1
        self.step += 1
        return name, rows


def schedule_batches(datasets: dict[str, Dataset], config: TrainConfig, seed: int | None = None
                     ) -> BatchScheduler:
    return BatchScheduler({n: len(d) for n, d in datasets.items()}, config.batch_size,
                          config.scheduling, config.seed if seed is None else seed)


def _slot(state: TrainState, key: str, like: np.ndarray) -> AdamSlot:
    slot = state.slots.get(key)
    if slot is None:
        slot = state.slots[key] = AdamSlot(np.zeros_like(like), np.zeros_like(like))
    return slot


def _update(state: TrainState, key: str, tensor: ad.Tensor, cfg: TrainConfig, table: bool) -> None:
    grad = tensor.grad
    tensor.grad = None
    if grad is None:
        return
    slot = _slot(state, key, tensor.data)
    if table:
        rows = touched_rows(grad)
        if len(rows):
            adam_step(tensor.data, grad, slot, cfg, rows)
    else:
        adam_step(tensor.data, grad, slot, cfg)


def train_step(model: DomainModel, shared: SharedEmbedding | None, ds: Dataset, rows: np.ndarray,
               cfg: TrainConfig, state: TrainState) -> tuple[float, float, float]:
    batch = model.encode_dataset(ds, rows)
    trace = forward(model, shared, batch)
    loss = prediction_loss(trace.p_hat, batch.labels)
    aux = auxiliary_loss(model, trace.E_c, trace.G_c, cfg.lam, cfg.aux_full_gradient)
    if trace.mapped is not None:
        dist = float(np.mean(np.sum((trace.E_c.data - trace.mapped.data) ** 2, axis=1)))
    else:
        dist = float("nan")
    lv, av = loss.item(), aux.item()
    if not (math.isfinite(lv) and math.isfinite(av)):
        raise TrainingError(f"non-finite loss at step {state.step} in domain {model.name}: "
                            f"prediction={lv} auxiliary={av}")
    alpha = cfg.alpha(model)
    if alpha > 0:
        ad.scale(ad.add(loss, aux), alpha).backward()
        for pname, tensor in model.params.items():
            _update(state, f"{model.name}/{pname}", tensor, cfg, pname in TABLE_PARAMS)
        if shared is not None:
            _update(state, "shared/W_g", shared.W_g, cfg, True)
    return lv, av, dist


def train(shared: SharedEmbedding | None, models: dict[str, DomainModel], datasets: dict[str, Dataset],
          config: TrainConfig, state: TrainState | None = None, steps: int | None = None,
          on_step: Callable[[int, str, float, float, float], None] | None = None) -> TrainState:
    """Run ``steps`` more steps (default: up to ``config.steps`` in total)."""
    state = state or TrainState()
    missing = set(models) - set(datasets)
    if missing:
        raise ValueError(f"no training data for domains {sorted(missing)}")
    sizes = {n: len(datasets[n]) for n in models}
    sched = BatchScheduler(sizes, config.batch_size, config.scheduling, config.seed,
                           step=state.step, batches_seen=state.batches_seen)
    todo = max(config.steps - state.step, 0) if steps is None else steps
    t0 = time.perf_counter()
    for _ in range(todo):
        step = sched.step
        name, rows = next(sched)
        lv, av, dist = train_step(models[name], shared, datasets[name], rows, config, state)
        state.step = sched.step
        state.batches_seen = dict(sched.batches_seen)
        state.history.append((step, name, lv, av, dist))
        if on_step is not None:
            on_step(step, name, lv, av, dist)
    if todo:
        log.debug("trained %d steps in %.2fs", todo, time.perf_counter() - t0)
    return state
