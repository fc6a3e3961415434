"""Declarative run configuration (one JSON document drives every command).

Top-level sections: ``schema`` (required), ``generator``, ``split``,
``model``, ``train``, ``experiment``. Unknown keys are rejected at every
level. The fingerprint is a content hash of the normalized document, with
defaults filled in; ``data_fingerprint`` covers only what determines the
generated datasets.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError, SchemaError
from .experiment import SplitConfig
from .model import MODES, ModelConfig
from .schema import GlobalSchema, build_schema
from .synth import GeneratorConfig
from .training import SCHEDULES, TrainConfig

_DOMAIN_KEYS = {"name", "domain_id", "n_rows", "base_ctr", "alpha", "fields"}
_FIELD_KEYS = {"field_id", "kind", "global_field_id", "vocab_size"}


@dataclass(frozen=True)
class ExperimentSettings:
    sources: list[str] = field(default_factory=list)
    targets: list[str] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    task1_source: str | None = None
    task4_domains: list[str] | None = None
    eval_every: int = 100
    base_steps: int | None = None
    base_eval_every: int | None = None


@dataclass
class RunConfig:
    schema: GlobalSchema
    generator: GeneratorConfig
    data_seed: int
    split: SplitConfig
    model: ModelConfig
    train: TrainConfig
    train_domains: list[str] | None
    checkpoint_every: int
    experiment: ExperimentSettings
    normalized: dict

    @property
    def fingerprint(self) -> str:
        return _hash(self.normalized)

    @property
    def data_fingerprint(self) -> str:
        return _hash({"schema": self.normalized["schema"], "generator": self.normalized["generator"]})


def _hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _keys(d, allowed: set[str], path: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"{path}: unknown key(s) {extra}")
    return d


def _num(d: dict, key: str, default, path: str, integer: bool = False):
    v = d.get(key, default)
    if v is None:
        return None
    bad = isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int))
    if bad:
        raise ConfigError(f"{path}.{key}: expected {'an integer' if integer else 'a number'}, got {v!r}")
    return v


def _bool(d: dict, key: str, default: bool, path: str) -> bool:
    v = d.get(key, default)
    if not isinstance(v, bool):
        raise ConfigError(f"{path}.{key}: expected true/false, got {v!r}")
    return v


def _names(d: dict, key: str, default, path: str):
    v = d.get(key, default)
    if v is None:
        return None
    if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
        raise ConfigError(f"{path}.{key}: expected a list of domain names")
    return list(v)


def _build(ctor, path: str, **kwargs):
    try:
        return ctor(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{path}: {e}") from None


def parse_config(raw: dict) -> RunConfig:
    _keys(raw, {"schema", "generator", "split", "model", "train", "experiment"}, "config")
    if "schema" not in raw:
        raise ConfigError("config: missing required section 'schema'")

    sch = _keys(raw["schema"], {"domains"}, "schema")
    for i, d in enumerate(sch.get("domains") or []):
        _keys(d, _DOMAIN_KEYS, f"schema.domains[{i}]")
        for j, f in enumerate(d.get("fields") or []):
            _keys(f, _FIELD_KEYS, f"schema.domains[{i}].fields[{j}]")
    try:
        schema = build_schema(sch)
    except (SchemaError, TypeError, ValueError) as e:
        raise ConfigError(f"schema: {e}") from None
    names = set(schema.names)

    g = _keys(raw.get("generator", {}), {"seed", "zipf_exponent", "latent_dim", "warp_strength", "shared_signal",
                                         "shared_scale", "specific_scale", "covariate_shift"}, "generator")
    gd = GeneratorConfig()
    generator = _build(
        GeneratorConfig, "generator",
        zipf_exponent=_num(g, "zipf_exponent", gd.zipf_exponent, "generator"),
        latent_dim=_num(g, "latent_dim", gd.latent_dim, "generator", integer=True),
        warp_strength=_num(g, "warp_strength", gd.warp_strength, "generator"),
        shared_signal=_bool(g, "shared_signal", gd.shared_signal, "generator"),
        shared_scale=_num(g, "shared_scale", gd.shared_scale, "generator"),
        specific_scale=_num(g, "specific_scale", gd.specific_scale, "generator"),
        covariate_shift=_bool(g, "covariate_shift", gd.covariate_shift, "generator"))
    data_seed = _num(g, "seed", 0, "generator", integer=True)

    s = _keys(raw.get("split", {}), {"train_frac", "valid_frac", "seed"}, "split")
    sd = SplitConfig()
    split = _build(SplitConfig, "split", train_frac=_num(s, "train_frac", sd.train_frac, "split"),
                   valid_frac=_num(s, "valid_frac", sd.valid_frac, "split"),
                   seed=_num(s, "seed", sd.seed, "split", integer=True))

    m = _keys(raw.get("model", {}), {"embedding_dim", "attention_hidden", "hidden_sizes"}, "model")
    md = ModelConfig()
    hidden = m.get("hidden_sizes", list(md.hidden_sizes))
    if not isinstance(hidden, list) or not all(isinstance(h, int) and not isinstance(h, bool) and h > 0
                                               for h in hidden):
        raise ConfigError("model.hidden_sizes: expected a list of positive integers")

    t = _keys(raw.get("train", {}), {"learning_rate", "beta1", "beta2", "epsilon", "batch_size", "steps", "lambda",
                                     "alphas", "scheduling", "seed", "mode", "aux_full_gradient",
                                     "gate_uses_mapped", "domains", "checkpoint_every"}, "train")
    mode = t.get("mode", md.mode)
    if mode not in MODES:
        raise ConfigError(f"train.mode: expected one of {list(MODES)}, got {mode!r}")
    model = _build(ModelConfig, "model",
                   embedding_dim=_num(m, "embedding_dim", md.embedding_dim, "model", integer=True),
                   attention_hidden=_num(m, "attention_hidden", md.attention_hidden, "model", integer=True),
                   hidden_sizes=tuple(hidden), mode=mode,
                   gate_uses_mapped=_bool(t, "gate_uses_mapped", md.gate_uses_mapped, "train"))
    alphas = t.get("alphas", {})
    if not isinstance(alphas, dict):
        raise ConfigError("train.alphas: expected an object mapping domain name to weight")
    for k in alphas:
        if k not in names:
            raise ConfigError(f"train.alphas: unknown domain {k!r}")
        _num(alphas, k, None, "train.alphas")
    scheduling = t.get("scheduling", "proportional")
    if scheduling not in SCHEDULES:
        raise ConfigError(f"train.scheduling: expected one of {list(SCHEDULES)}, got {scheduling!r}")
    td = TrainConfig()
    train = _build(TrainConfig, "train",
                   learning_rate=_num(t, "learning_rate", td.learning_rate, "train"),
                   beta1=_num(t, "beta1", td.beta1, "train"), beta2=_num(t, "beta2", td.beta2, "train"),
                   epsilon=_num(t, "epsilon", td.epsilon, "train"),
                   batch_size=_num(t, "batch_size", td.batch_size, "train", integer=True),
                   steps=_num(t, "steps", td.steps, "train", integer=True),
                   lam=_num(t, "lambda", td.lam, "train"), alphas=dict(alphas), scheduling=scheduling,
                   seed=_num(t, "seed", td.seed, "train", integer=True),
                   aux_full_gradient=_bool(t, "aux_full_gradient", td.aux_full_gradient, "train"))
    train_domains = _names(t, "domains", None, "train")
    for n in train_domains or []:
        if n not in names:
            raise ConfigError(f"train.domains: unknown domain {n!r}")
    checkpoint_every = _num(t, "checkpoint_every", 500, "train", integer=True)
    if checkpoint_every < 1:
        raise ConfigError("train.checkpoint_every: must be >= 1")

    e = _keys(raw.get("experiment", {}), {"sources", "targets", "seeds", "task1_source", "task4_domains",
                                          "eval_every", "base_steps", "base_eval_every"}, "experiment")
    ed = ExperimentSettings()
    seeds = e.get("seeds", ed.seeds)
    if not isinstance(seeds, list) or not seeds or not all(isinstance(x, int) and not isinstance(x, bool)
                                                          for x in seeds):
        raise ConfigError("experiment.seeds: expected a nonempty list of integers")
    experiment = ExperimentSettings(
        sources=_names(e, "sources", [], "experiment"), targets=_names(e, "targets", [], "experiment"),
        seeds=list(seeds), task1_source=e.get("task1_source"),
        task4_domains=_names(e, "task4_domains", None, "experiment"),
        eval_every=_num(e, "eval_every", ed.eval_every, "experiment", integer=True),
        base_steps=_num(e, "base_steps", None, "experiment", integer=True),
        base_eval_every=_num(e, "base_eval_every", None, "experiment", integer=True))
    for key in ("sources", "targets", "task4_domains"):
        for n in getattr(experiment, key) or []:
            if n not in names:
                raise ConfigError(f"experiment.{key}: unknown domain {n!r}")
    if experiment.task1_source is not None and experiment.task1_source not in experiment.sources:
        raise ConfigError("experiment.task1_source: must be one of experiment.sources")
    if experiment.eval_every < 1:
        raise ConfigError("experiment.eval_every: must be >= 1")
    if experiment.base_eval_every is not None and experiment.base_eval_every < 1:
        raise ConfigError("experiment.base_eval_every: must be >= 1")

    normalized = {
        "schema": schema.to_dict(),
        "generator": {"seed": data_seed, **asdict(generator)},
        "split": asdict(split),
        "model": {"embedding_dim": model.embedding_dim, "attention_hidden": model.attention_hidden,
                  "hidden_sizes": list(model.hidden_sizes)},
        "train": {**{k: v for k, v in asdict(train).items() if k != "lam"}, "lambda": train.lam,
                  "mode": model.mode, "gate_uses_mapped": model.gate_uses_mapped,
                  "domains": train_domains, "checkpoint_every": checkpoint_every},
        "experiment": asdict(experiment),
    }
    return RunConfig(schema, generator, data_seed, split, model, train, train_domains, checkpoint_every,
                     experiment, normalized)


PRESETS = ("table1", "acceptance")


def preset_path(name: str) -> Path:
    """Bundled configs: ``table1`` (Table-1 CTR ratios) and ``acceptance`` (CTRs scaled for desk-size AUC)."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {list(PRESETS)}")
    return Path(__file__).with_name("presets") / f"{name}.json"


def load_config(path: str | Path) -> RunConfig:
    """Load a JSON config file; ``preset:<name>`` selects a bundled one."""
    if isinstance(path, str) and path.startswith("preset:"):
        path = preset_path(path.split(":", 1)[1])
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read ({e.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    return parse_config(raw)
