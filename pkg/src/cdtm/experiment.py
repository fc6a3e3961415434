"""Experiment harness for the four task designs.

=====  ==========================================  ==========================
task   trained per seed                            tags
=====  ==========================================  ==========================
1      Base and CDTM-<src> for each target         Base, CDTM-<src>
2      Base, each single-source CDTM, all-source   Base, CDTM-<src>..., CDTM
3      Base, attention-free CDTM, CDTM             Base, CDTM-DA, CDTM
4      Base per domain, one joint model            Base, CDTM_<n>
=====  ==========================================  ==========================

Every run trains for a fixed step budget; the test AUC reported for a
domain is the one at the evaluation point with the best validation AUC.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .metrics import auc, imp
from .model import ModelConfig, build_models
from .schema import GlobalSchema
from .synth import Dataset, split
from .training import TrainConfig, TrainState, train

log = logging.getLogger(__name__)

TASKS = (1, 2, 3, 4)


@dataclass(frozen=True)
class SplitConfig:
    train_frac: float = 0.8
    valid_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError(f"train_frac must lie in (0, 1), got {self.train_frac}")
        if not 0.0 < self.valid_frac < 1.0:
            raise ValueError(f"valid_frac must lie in (0, 1), got {self.valid_frac}")


@dataclass
class Splits:
    train: Dataset
    valid: Dataset
    test: Dataset


def make_splits(datasets: dict[str, Dataset], cfg: SplitConfig) -> dict[str, Splits]:
    """Test split first, then a validation slice carved from the training part."""
    out = {}
    for name, ds in datasets.items():
        fit, test = split(ds, cfg.train_frac, cfg.seed)
        tr, va = split(fit, 1.0 - cfg.valid_frac, cfg.seed + 1)
        out[name] = Splits(tr, va, test)
    return out


@dataclass
class ExperimentPlan:
    task: int
    sources: list[str]
    targets: list[str]
    seeds: list[int]
    train: TrainConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    eval_every: int = 250
    # Base only ever sees the target, so it needs far fewer steps than a joint run
    base_steps: int | None = None
    # Base trains on the target alone, so 100 steps are 100 target updates, while a
    # joint run spends only the target's share of them; a finer grid keeps selection fair
    base_eval_every: int | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task}")
        if not self.targets or not self.seeds:
            raise ValueError("plan needs at least one target and one seed")
        if self.task == 1 and len(self.sources) != 1:
            raise ValueError("task 1 takes exactly one source domain")
        if self.task == 2 and len(self.sources) < 2:
            raise ValueError("task 2 takes at least two source domains")
        if self.task == 3 and not self.sources:
            raise ValueError("task 3 needs source domains")
        if self.task == 4 and sorted(self.sources) != sorted(self.targets):
            raise ValueError("task 4 trains every domain as both source and target")
        if self.task != 4 and set(self.sources) & set(self.targets):
            raise ValueError("a domain cannot be both source and target outside task 4")
        if self.eval_every < 1 or (self.base_eval_every is not None and self.base_eval_every < 1):
            raise ValueError("eval_every and base_eval_every must be >= 1")

    def tags(self) -> list[str]:
        if self.task == 1:
            return ["Base", f"CDTM-{self.sources[0]}"]
        if self.task == 2:
            return ["Base"] + [f"CDTM-{s}" for s in self.sources] + ["CDTM"]
        if self.task == 3:
            return ["Base", "CDTM-DA", "CDTM"]
        return ["Base", f"CDTM_{len(self.targets)}"]


@dataclass
class MetricRow:
    domain: str
    model_tag: str
    auc: float
    imp_pct: float
    seed: int
    valid_auc: float
    best_step: int

    @property
    def negative_transfer(self) -> bool:
        return self.model_tag != "Base" and self.imp_pct < 0


@dataclass
class RunResult:
    tag: str
    seed: int
    test_auc: dict[str, float]
    valid_auc: dict[str, float]
    best_step: dict[str, int]
    loss_curve: dict[str, list[tuple[int, float]]]
    align_curve: dict[str, list[tuple[int, float]]]
    state: TrainState | None = None


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    rows: list[MetricRow]
    runs: list[RunResult]

    def rows_for(self, tag: str, domain: str | None = None) -> list[MetricRow]:
        return [r for r in self.rows if r.model_tag == tag and (domain is None or r.domain == domain)]


def _curve(history, name: str, col: int, every: int) -> list[tuple[int, float]]:
    pts = [(h[0], h[col]) for h in history if h[1] == name]
    out = []
    for lo in range(0, len(pts), every):
        chunk = [v for _, v in pts[lo:lo + every] if np.isfinite(v)]
        if chunk:
            out.append((pts[min(lo + every, len(pts)) - 1][0], float(np.mean(chunk))))
    return out


def run_training(tag: str, schema: GlobalSchema, domains: list[str], targets: list[str], mode: str,
                 splits: dict[str, Splits], seed: int, plan: ExperimentPlan,
                 keep_state: bool = False) -> RunResult:
    """Train one model set on ``domains`` and score ``targets`` by best validation AUC."""
    sub = schema.subset(domains)
    mcfg = replace(plan.model, mode=mode)
    shared, models = build_models(sub, mcfg, seed)
    cfg = replace(plan.train, seed=seed)
    eval_every = plan.eval_every
    if mode == "base":
        if plan.base_steps is not None:
            cfg = replace(cfg, steps=plan.base_steps)
        eval_every = plan.base_eval_every or eval_every
    data = {n: splits[n].train.with_spec(sub.domain(n)) for n in domains}
    valid = {n: splits[n].valid.with_spec(sub.domain(n)) for n in targets}
    test = {n: splits[n].test.with_spec(sub.domain(n)) for n in targets}
    best_valid = {n: -np.inf for n in targets}
    best_test = {n: float("nan") for n in targets}
    best_step = {n: 0 for n in targets}
    state = TrainState()
    while state.step < cfg.steps:
        chunk = min(eval_every, cfg.steps - state.step)
        state = train(shared, models, data, cfg, state=state, steps=chunk)
        for n in targets:
            va = auc(models[n].predict(shared, valid[n]), valid[n].labels)
            if va > best_valid[n]:
                best_valid[n] = va
                best_test[n] = auc(models[n].predict(shared, test[n]), test[n].labels)
                best_step[n] = state.step
    every = max(eval_every // max(len(domains), 1), 1)
    loss_curve = {n: _curve(state.history, n, 2, every) for n in domains}
    # alignment curves open with the exact pre-update value of the first batch
    align_curve = {n: [(h[0], h[4]) for h in state.history if h[1] == n and np.isfinite(h[4])][:1] + _curve(state.history, n, 4, every)
                   for n in domains}
    log.info("%s seed=%d %s", tag, seed, {n: round(v, 4) for n, v in best_test.items()})
    return RunResult(tag, seed, best_test, best_valid, best_step, loss_curve, align_curve,
                     state if keep_state else None)


def run_experiment(plan: ExperimentPlan, schema: GlobalSchema, datasets: dict[str, Dataset],
                   split_cfg: SplitConfig | None = None, keep_state: bool = False) -> ExperimentResult:
    needed = set(plan.sources) | set(plan.targets)
    missing = needed - set(datasets)
    if missing:
        raise ValueError(f"plan references domains without data: {sorted(missing)}")
    unknown = needed - set(schema.names)
    if unknown:
        raise ValueError(f"plan references domains missing from the schema: {sorted(unknown)}")
    splits = make_splits({n: datasets[n] for n in sorted(needed)}, split_cfg or SplitConfig())

    runs: list[RunResult] = []
    rows: list[MetricRow] = []
    for seed in plan.seeds:
        seed_runs: list[RunResult] = []
        for t in plan.targets:
            seed_runs.append(run_training("Base", schema, [t], [t], "base", splits, seed, plan, keep_state))
        if plan.task == 4:
            seed_runs.append(run_training(plan.tags()[1], schema, list(plan.targets), list(plan.targets),
                                          "full", splits, seed, plan, keep_state))
        else:
            for t in plan.targets:
                if plan.task in (1, 2):
                    for s in plan.sources:
                        seed_runs.append(run_training(f"CDTM-{s}", schema, [t, s], [t], "full",
                                                      splits, seed, plan, keep_state))
                if plan.task == 3:
                    seed_runs.append(run_training("CDTM-DA", schema, [t] + plan.sources, [t], "no_attention",
                                                  splits, seed, plan, keep_state))
                if plan.task in (2, 3):
                    seed_runs.append(run_training("CDTM", schema, [t] + plan.sources, [t], "full",
                                                  splits, seed, plan, keep_state))
        base = {}
        for r in seed_runs:
            if r.tag == "Base":
                base.update(r.test_auc)
        for t in plan.targets:
            for r in seed_runs:
                if t in r.test_auc:
                    rows.append(MetricRow(t, r.tag, r.test_auc[t], imp(r.test_auc[t], base[t]), seed,
                                          r.valid_auc[t], r.best_step[t]))
        runs.extend(seed_runs)
    return ExperimentResult(plan, rows, runs)


def plan_to_dict(plan: ExperimentPlan) -> dict:
    d = asdict(plan)
    d["model"]["hidden_sizes"] = list(plan.model.hidden_sizes)
    return d
