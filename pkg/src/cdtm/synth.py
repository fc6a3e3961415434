"""Synthetic heterogeneous multi-domain click data.

Click model per domain ``d`` and record ``x``::

    logit_d(x) = bias_d + sum_shared  u . (M_d s[g, x_g]) + sum_specific e_d[f, x_f]

``s`` holds one latent vector per shared feature value, common to every
domain when the shared signal is on; ``M_d = I + w * D_d`` is a per-domain
linear warp (``w`` the warp strength, ``D_d`` spectral norm 1) so the same
feature means different things in different domains; ``bias_d`` is solved so
the domain's expected CTR matches its ``base_ctr``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.optimize import brentq

from .schema import DomainSpec, GlobalSchema

# spawn keys that separate the independent random streams
_STREAM_SHARED = 1
_STREAM_WARP = 2
_STREAM_SPECIFIC = 3
_STREAM_DIST = 4
_STREAM_ROWS = 5
_STREAM_SPLIT = 6
_STREAM_READOUT = 7
_STREAM_PRIVATE_SHARED = 8


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass(frozen=True)
class GeneratorConfig:
    zipf_exponent: float = 1.1
    latent_dim: int = 4
    warp_strength: float = 0.5
    shared_signal: bool = True
    shared_scale: float = 1.0
    specific_scale: float = 0.5
    covariate_shift: bool = True

    def __post_init__(self):
        if not 0.0 <= self.warp_strength < 1.0:
            raise ValueError("warp_strength must lie in [0, 1) to keep the warp invertible")
        if self.latent_dim < 1 or self.zipf_exponent <= 0:
            raise ValueError("latent_dim must be >= 1 and zipf_exponent > 0")


@dataclass(frozen=True)
class ClickRecord:
    transferable_idx: tuple[tuple[int, int], ...]
    specific_idx: tuple[tuple[int, int], ...]
    label: int


@dataclass
class Dataset:
    """Columnar click data for one domain: ``values[row, j]`` indexes ``spec.fields[j]``."""

    spec: DomainSpec
    values: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.uint32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def name(self) -> str:
        return self.spec.name

    def ctr(self) -> float:
        return float(self.labels.mean()) if len(self) else 0.0

    def take(self, rows: np.ndarray) -> "Dataset":
        return Dataset(self.spec, self.values[rows], self.labels[rows])

    def with_spec(self, spec: DomainSpec) -> "Dataset":
        if [f.field_id for f in spec.fields] != [f.field_id for f in self.spec.fields]:
            raise ValueError(f"spec for {spec.name} does not match the dataset's field layout")
        return Dataset(spec, self.values, self.labels)

    def records(self) -> Iterator[ClickRecord]:
        fields = self.spec.fields
        for row, y in zip(self.values, self.labels):
            trans = tuple((f.global_field_id, int(v)) for f, v in zip(fields, row) if f.transferable)
            spec = tuple((f.field_id, int(v)) for f, v in zip(fields, row) if not f.transferable)
            yield ClickRecord(trans, spec, int(y))


@dataclass
class GroundTruth:
    readout: np.ndarray
    shared_effect: dict[int, np.ndarray]
    domain_warp: dict[str, np.ndarray]
    specific_effect: dict[str, dict[int, np.ndarray]]
    bias: dict[str, float]
    shared_signal: bool = True
    # per-domain shared tables, used only when the shared signal is off
    private_shared_effect: dict[str, dict[int, np.ndarray]] = field(default_factory=dict)

    def shared_table(self, domain: str, gid: int) -> np.ndarray:
        if self.shared_signal:
            return self.shared_effect[gid]
        return self.private_shared_effect[domain][gid]

    def shared_contribution(self, domain: str, gid: int) -> np.ndarray:
        """Logit contribution of every value of global field ``gid`` in ``domain``."""
        warped = self.shared_table(domain, gid) @ self.domain_warp[domain].T
        return warped @ self.readout

    def to_dict(self) -> dict:
        def arr(a):
            return np.asarray(a).tolist()
        return {
            "readout": arr(self.readout),
            "shared_signal": self.shared_signal,
            "shared_effect": {str(g): arr(t) for g, t in self.shared_effect.items()},
            "private_shared_effect": {d: {str(g): arr(t) for g, t in m.items()}
                                      for d, m in self.private_shared_effect.items()},
            "domain_warp": {d: arr(m) for d, m in self.domain_warp.items()},
            "specific_effect": {d: {str(f): arr(t) for f, t in m.items()}
                                for d, m in self.specific_effect.items()},
            "bias": dict(self.bias),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            readout=np.array(d["readout"]),
            shared_effect={int(g): np.array(t) for g, t in d["shared_effect"].items()},
            domain_warp={k: np.array(m) for k, m in d["domain_warp"].items()},
            specific_effect={k: {int(f): np.array(t) for f, t in m.items()}
                             for k, m in d["specific_effect"].items()},
            bias={k: float(v) for k, v in d["bias"].items()},
            shared_signal=bool(d["shared_signal"]),
            private_shared_effect={k: {int(g): np.array(t) for g, t in m.items()}
                                   for k, m in d.get("private_shared_effect", {}).items()},
        )

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        d = self.to_dict()
        if meta:
            d["meta"] = meta
        Path(path).write_text(json.dumps(d, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text()))


def warp_divergence(truth: GroundTruth, a: str, b: str, gids: list[int] | None = None) -> float:
    """Mean squared gap between two domains' shared-feature logit contributions."""
    gids = sorted(truth.shared_effect) if gids is None else gids
    gaps = [truth.shared_contribution(a, g) - truth.shared_contribution(b, g) for g in gids]
    return float(np.mean(np.concatenate(gaps) ** 2))


def zipf_probs(vocab: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, vocab + 1, dtype=np.float64) ** exponent
    return w / w.sum()


def solve_bias(logits: np.ndarray, target_ctr: float) -> float:
    """Scalar ``b`` with ``mean(sigmoid(b + logits)) == target_ctr``."""
    def gap(b):
        return float(np.mean(1.0 / (1.0 + np.exp(-(b + logits))))) - target_ctr
    lo, hi = -60.0, 60.0
    return float(brentq(gap, lo, hi, xtol=1e-12))


def _warp(rng: np.random.Generator, r: int, strength: float) -> np.ndarray:
    g = rng.standard_normal((r, r))
    g /= np.linalg.norm(g, 2)
    return np.eye(r) + strength * g


def make_ground_truth(schema: GlobalSchema, seed: int, cfg: GeneratorConfig) -> GroundTruth:
    r = cfg.latent_dim
    readout = stream(seed, _STREAM_READOUT).standard_normal(r)
    readout /= np.linalg.norm(readout)
    shared = {gid: cfg.shared_scale * stream(seed, _STREAM_SHARED, gid).standard_normal((v, r))
              for gid, v in schema.global_fields}
    warp, specific, private = {}, {}, {}
    for d in schema.domains:
        warp[d.name] = _warp(stream(seed, _STREAM_WARP, d.domain_id), r, cfg.warp_strength)
        specific[d.name] = {
            f.field_id: cfg.specific_scale * stream(seed, _STREAM_SPECIFIC, d.domain_id, f.field_id)
            .standard_normal(f.vocab_size)
            for f in d.specific_fields
        }
        if not cfg.shared_signal:
            private[d.name] = {
                f.global_field_id: cfg.shared_scale
                * stream(seed, _STREAM_PRIVATE_SHARED, d.domain_id, f.global_field_id)
                .standard_normal((f.vocab_size, r))
                for f in d.transferable_fields
            }
    return GroundTruth(readout, shared, warp, specific, bias={}, shared_signal=cfg.shared_signal,
                       private_shared_effect=private)


def _value_probs(spec: DomainSpec, seed: int, cfg: GeneratorConfig) -> list[np.ndarray]:
    probs = []
    for f in spec.fields:
        base = zipf_probs(f.vocab_size, cfg.zipf_exponent)
        if f.transferable and not cfg.covariate_shift:
            rng = stream(seed, _STREAM_DIST, 0, 1_000_000 + f.global_field_id)
        else:
            rng = stream(seed, _STREAM_DIST, spec.domain_id + 1, f.field_id)
        probs.append(base[rng.permutation(f.vocab_size)])
    return probs


def domain_logits(spec: DomainSpec, truth: GroundTruth, values: np.ndarray) -> np.ndarray:
    """Ground-truth logit of each row, without the domain bias."""
    logits = np.zeros(values.shape[0])
    for j, f in enumerate(spec.fields):
        col = values[:, j].astype(np.int64)
        if f.transferable:
            logits += truth.shared_contribution(spec.name, f.global_field_id)[col]
        else:
            logits += truth.specific_effect[spec.name][f.field_id][col]
    return logits


def generate(schema: GlobalSchema, seed: int, cfg: GeneratorConfig | None = None
             ) -> tuple[dict[str, Dataset], GroundTruth]:
    """One dataset per domain plus the ground truth that produced it."""
    cfg = cfg or GeneratorConfig()
    truth = make_ground_truth(schema, seed, cfg)
    datasets = {}
    for spec in schema.domains:
        rng = stream(seed, _STREAM_ROWS, spec.domain_id)
        probs = _value_probs(spec, seed, cfg)
        values = np.empty((spec.n_rows, spec.n_fields), dtype=np.uint32)
        for j, (f, p) in enumerate(zip(spec.fields, probs)):
            values[:, j] = rng.choice(f.vocab_size, size=spec.n_rows, p=p)
        logits = domain_logits(spec, truth, values)
        b = solve_bias(logits, spec.base_ctr)
        truth.bias[spec.name] = b
        p_click = 1.0 / (1.0 + np.exp(-(b + logits)))
        labels = (rng.random(spec.n_rows) < p_click).astype(np.uint8)
        datasets[spec.name] = Dataset(spec, values, labels)
    return datasets, truth


def split(dataset: Dataset, train_frac: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split into (train, test)."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must lie in (0, 1), got {train_frac}")
    n = len(dataset)
    n_train = int(round(train_frac * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} rows at {train_frac} leaves one side empty")
    perm = stream(seed, _STREAM_SPLIT, dataset.spec.domain_id).permutation(n)
    return dataset.take(np.sort(perm[:n_train])), dataset.take(np.sort(perm[n_train:]))
