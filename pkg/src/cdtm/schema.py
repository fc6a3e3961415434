"""Multi-domain feature schema.

Each domain owns a list of categorical fields. A field is either
*transferable* (it refers to a global field shared with other domains and is
looked up in both the domain table and the shared table) or
*nontransferable* (domain table only).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError

TRANSFERABLE = "transferable"
NONTRANSFERABLE = "nontransferable"


@dataclass(frozen=True)
class FieldSpec:
    field_id: int
    kind: str
    vocab_size: int
    global_field_id: int | None = None

    def __post_init__(self):
        if self.kind not in (TRANSFERABLE, NONTRANSFERABLE):
            raise SchemaError(f"field {self.field_id}: unknown kind {self.kind!r}")
        if self.vocab_size < 1:
            raise SchemaError(f"field {self.field_id}: vocab_size must be positive")
        if (self.kind == TRANSFERABLE) != (self.global_field_id is not None):
            raise SchemaError(f"field {self.field_id}: global_field_id is required iff the field is transferable")

    @property
    def transferable(self) -> bool:
        return self.kind == TRANSFERABLE

    def to_dict(self) -> dict:
        d = {"field_id": self.field_id, "kind": self.kind, "vocab_size": self.vocab_size}
        if self.global_field_id is not None:
            d["global_field_id"] = self.global_field_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FieldSpec":
        return cls(field_id=int(d["field_id"]), kind=d["kind"], vocab_size=int(d["vocab_size"]),
                   global_field_id=None if d.get("global_field_id") is None else int(d["global_field_id"]))


@dataclass(frozen=True)
class DomainSpec:
    name: str
    domain_id: int
    fields: tuple[FieldSpec, ...]
    n_rows: int
    base_ctr: float
    alpha: float = 1.0

    def __post_init__(self):
        ids = [f.field_id for f in self.fields]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"domain {self.name}: duplicate field_id")
        gids = [f.global_field_id for f in self.fields if f.transferable]
        if len(set(gids)) != len(gids):
            raise SchemaError(f"domain {self.name}: global_field_id repeated within the domain")
        if self.n_rows < 1:
            raise SchemaError(f"domain {self.name}: n_rows must be positive")
        if not 0.0 < self.base_ctr < 1.0:
            raise SchemaError(f"domain {self.name}: base_ctr must lie in (0, 1)")
        if self.alpha < 0:
            raise SchemaError(f"domain {self.name}: alpha must be >= 0")

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    @property
    def transferable_fields(self) -> list[FieldSpec]:
        return [f for f in self.fields if f.transferable]

    @property
    def specific_fields(self) -> list[FieldSpec]:
        return [f for f in self.fields if not f.transferable]

    @property
    def n_transferable(self) -> int:
        return len(self.transferable_fields)

    @property
    def vocab_total(self) -> int:
        return sum(f.vocab_size for f in self.fields)

    @property
    def vocab_sizes(self) -> np.ndarray:
        return np.array([f.vocab_size for f in self.fields], dtype=np.int64)

    def to_dict(self) -> dict:
        return {"name": self.name, "domain_id": self.domain_id, "n_rows": self.n_rows,
                "base_ctr": self.base_ctr, "alpha": self.alpha,
                "fields": [f.to_dict() for f in self.fields]}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(name=str(d["name"]), domain_id=int(d["domain_id"]),
                   fields=tuple(FieldSpec.from_dict(f) for f in d["fields"]),
                   n_rows=int(d["n_rows"]), base_ctr=float(d["base_ctr"]),
                   alpha=float(d.get("alpha", 1.0)))

    def demoted(self, keep_global: set[int]) -> "DomainSpec":
        """Copy in which transferable fields outside ``keep_global`` become nontransferable."""
        fields = tuple(
            f if (not f.transferable or f.global_field_id in keep_global)
            else FieldSpec(f.field_id, NONTRANSFERABLE, f.vocab_size)
            for f in self.fields
        )
        return DomainSpec(self.name, self.domain_id, fields, self.n_rows, self.base_ctr, self.alpha)


@dataclass(frozen=True)
class GlobalSchema:
    domains: tuple[DomainSpec, ...]
    global_fields: tuple[tuple[int, int], ...] = field(init=False)

    def __post_init__(self):
        vocab: dict[int, int] = {}
        names, ids = set(), set()
        for d in self.domains:
            if d.name in names:
                raise SchemaError(f"duplicate domain name {d.name!r}")
            if d.domain_id in ids:
                raise SchemaError(f"duplicate domain_id {d.domain_id}")
            names.add(d.name)
            ids.add(d.domain_id)
            for f in d.transferable_fields:
                seen = vocab.setdefault(f.global_field_id, f.vocab_size)
                if seen != f.vocab_size:
                    raise SchemaError(
                        f"global field {f.global_field_id}: vocab {f.vocab_size} in domain {d.name} "
                        f"conflicts with vocab {seen} declared elsewhere")
        object.__setattr__(self, "global_fields", tuple(sorted(vocab.items())))

    @property
    def p(self) -> int:
        """Number of shared feature values (rows of the shared table)."""
        return sum(v for _, v in self.global_fields)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.domains]

    def domain(self, name: str) -> DomainSpec:
        for d in self.domains:
            if d.name == name:
                return d
        raise SchemaError(f"unknown domain {name!r}")

    def global_offsets(self) -> dict[int, int]:
        offsets, acc = {}, 0
        for gid, v in self.global_fields:
            offsets[gid] = acc
            acc += v
        return offsets

    def subset(self, names: list[str]) -> "GlobalSchema":
        """Schema restricted to ``names``.

        With two or more domains, only global fields shared by at least two of
        them stay transferable; the rest are demoted to domain-only fields.
        """
        chosen = [self.domain(n) for n in names]
        if len(chosen) < 2:
            return GlobalSchema(tuple(chosen))
        counts: dict[int, int] = {}
        for d in chosen:
            for f in d.transferable_fields:
                counts[f.global_field_id] = counts.get(f.global_field_id, 0) + 1
        keep = {g for g, c in counts.items() if c >= 2}
        return GlobalSchema(tuple(d.demoted(keep) for d in chosen))

    def to_dict(self) -> dict:
        return {"domains": [d.to_dict() for d in self.domains]}

    @classmethod
    def from_dict(cls, d: dict) -> "GlobalSchema":
        return cls(tuple(DomainSpec.from_dict(x) for x in d["domains"]))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_schema(config: dict) -> GlobalSchema:
    """Validate a schema config (``{"domains": [...]}``) into a GlobalSchema."""
    domains = config.get("domains")
    if not isinstance(domains, list) or len(domains) < 2:
        raise SchemaError("schema needs at least two domains")
    specs = []
    for i, d in enumerate(domains):
        try:
            spec = DomainSpec.from_dict(d)
        except KeyError as e:
            raise SchemaError(f"domains[{i}]: missing key {e.args[0]!r}") from None
        if spec.n_transferable < 1:
            raise SchemaError(f"domain {spec.name}: needs at least one transferable field")
        specs.append(spec)
    return GlobalSchema(tuple(specs))
