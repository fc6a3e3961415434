"""Per-domain CDTM network sharing one global embedding table.

For the transferable fields of a record the domain embedding ``E_c`` and the
shared embedding ``G_c`` are combined as::

    E = E_c * A + (G_c @ T.T) * (1 - A)
    A = sigmoid(V1 relu(V0 [E_c, E_c*G_c, E_c+G_c, G_c] + b0) + b1)

then ``[E, E_d]`` runs through a relu MLP and a sigmoid head. ``T`` is a full
k x k map applied to every shared row; an element-wise ``T`` cannot rotate
one latent space onto another.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import SchemaError
from .schema import DomainSpec, GlobalSchema
from .synth import Dataset, stream

MODES = ("full", "no_attention", "base")

_INIT_DSE = 10
_INIT_GSE = 11
_INIT_T = 12
_INIT_ATTN = 13
_INIT_DEEP = 14
_INIT_HEAD = 15


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 16
    attention_hidden: int = 32
    hidden_sizes: tuple[int, ...] = (200, 128)
    mode: str = "full"
    gate_uses_mapped: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.embedding_dim < 1 or self.attention_hidden < 1 or not self.hidden_sizes:
            raise ValueError("embedding_dim, attention_hidden and hidden_sizes must be positive/non-empty")


def name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


@dataclass
class ClickBatch:
    """Encoded rows for one domain: table row ids plus labels."""

    domain: str
    dse_trans: np.ndarray
    gse_trans: np.ndarray | None
    dse_specific: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class ForwardTrace:
    """Intermediate tensors of one forward pass.

    Per-field tensors are stacked record-major: row ``b * m + j`` belongs to
    record ``b``, transferable field ``j``.
    """

    E_c: Tensor | None
    G_c: Tensor | None
    mapped: Tensor | None
    A: Tensor | None
    E: Tensor | None
    E_d: Tensor | None
    x0: Tensor
    o: Tensor
    p_hat: Tensor


class SharedEmbedding:
    """The global table, one row per shared feature value."""

    def __init__(self, schema: GlobalSchema, k: int, seed: int = 0):
        self.global_fields = schema.global_fields
        self.offsets = schema.global_offsets()
        self.k = k
        self.W_g = Tensor(np.zeros((schema.p, k)), requires_grad=True, name="W_g")
        self.init(seed)

    @property
    def p(self) -> int:
        return self.W_g.shape[0]

    def init(self, seed: int) -> None:
        bound = 1.0 / np.sqrt(self.k)
        for gid, vocab in self.global_fields:
            lo = self.offsets[gid]
            self.W_g.data[lo:lo + vocab] = stream(seed, _INIT_GSE, gid).uniform(-bound, bound, (vocab, self.k))

    def params(self) -> dict[str, Tensor]:
        return {"W_g": self.W_g}


class DomainModel:
    def __init__(self, spec: DomainSpec, schema: GlobalSchema | None, config: ModelConfig, seed: int = 0):
        self.spec = spec
        self.name = spec.name
        self.config = config
        self.mode = config.mode
        k, dh = config.embedding_dim, config.attention_hidden
        self.k = k

        sizes = spec.vocab_sizes
        self.dse_offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.trans_cols = np.array([j for j, f in enumerate(spec.fields) if f.transferable], dtype=np.int64)
        self.spec_cols = np.array([j for j, f in enumerate(spec.fields) if not f.transferable], dtype=np.int64)
        self.gse_offsets = None
        if schema is not None and self.mode != "base" and len(self.trans_cols):
            offsets = schema.global_offsets()
            missing = [f.global_field_id for f in spec.transferable_fields if f.global_field_id not in offsets]
            if missing:
                raise SchemaError(f"domain {self.name}: global fields {missing} not in the shared schema")
            self.gse_offsets = np.array([offsets[f.global_field_id] for f in spec.transferable_fields],
                                        dtype=np.int64)

        width = spec.n_fields * k
        self.params: dict[str, Tensor] = {
            "W": Tensor(np.zeros((spec.vocab_total, k)), True, "W"),
            "T": Tensor(np.eye(k), True, "T"),
            "V0": Tensor(np.zeros((dh, 4 * k)), True, "V0"),
            "b0": Tensor(np.zeros(dh), True, "b0"),
            "V1": Tensor(np.zeros((k, dh)), True, "V1"),
            "b1": Tensor(np.zeros(k), True, "b1"),
        }
        fan_in = width
        for i, h in enumerate(config.hidden_sizes):
            self.params[f"L{i}.w"] = Tensor(np.zeros((fan_in, h)), True, f"L{i}.w")
            self.params[f"L{i}.b"] = Tensor(np.zeros(h), True, f"L{i}.b")
            fan_in = h
        self.params["Q"] = Tensor(np.zeros(fan_in), True, "Q")
        self.params["z"] = Tensor(np.zeros(1), True, "z")
        init_params(self, seed)

    @property
    def m(self) -> int:
        return len(self.trans_cols)

    def __getitem__(self, key: str) -> Tensor:
        return self.params[key]

    def encode(self, values: np.ndarray, labels: np.ndarray | None = None) -> ClickBatch:
        values = np.asarray(values)
        if values.ndim != 2 or values.shape[1] != self.spec.n_fields:
            raise SchemaError(f"domain {self.name}: rows have {values.shape[-1]} fields, "
                              f"expected {self.spec.n_fields}")
        ids = values.astype(np.int64)
        over = ids >= self.spec.vocab_sizes[None, :]
        if over.any():
            row, col = map(int, np.argwhere(over)[0])
            raise SchemaError(f"domain {self.name}: row {row} value {ids[row, col]} exceeds vocab of "
                              f"field {self.spec.fields[col].field_id}")
        dse = ids + self.dse_offsets[None, :]
        gse = None
        if self.gse_offsets is not None:
            gse = ids[:, self.trans_cols] + self.gse_offsets[None, :]
        y = np.zeros(len(ids)) if labels is None else np.asarray(labels, dtype=np.float64)
        return ClickBatch(self.name, dse[:, self.trans_cols], gse, dse[:, self.spec_cols], y)

    def encode_dataset(self, ds: Dataset, rows: np.ndarray | None = None) -> ClickBatch:
        if ds.spec.name != self.name:
            raise SchemaError(f"dataset of domain {ds.spec.name} fed to model {self.name}")
        if rows is None:
            return self.encode(ds.values, ds.labels)
        return self.encode(ds.values[rows], ds.labels[rows])

    def predict(self, shared: SharedEmbedding | None, ds: Dataset, chunk: int = 8192) -> np.ndarray:
        out = []
        for lo in range(0, len(ds), chunk):
            rows = np.arange(lo, min(lo + chunk, len(ds)))
            out.append(forward(self, shared, self.encode_dataset(ds, rows)).p_hat.data)
        return np.concatenate(out) if out else np.zeros(0)


def init_params(model: DomainModel, seed: int) -> DomainModel:
    """Deterministic initialization keyed by (seed, domain name, parameter group)."""
    k = model.k
    key = name_key(model.name)
    p = model.params
    bound = 1.0 / np.sqrt(k)
    W = p["W"].data
    for j, f in enumerate(model.spec.fields):
        lo = model.dse_offsets[j]
        W[lo:lo + f.vocab_size] = stream(seed, _INIT_DSE, key, f.field_id).uniform(-bound, bound, (f.vocab_size, k))
    p["T"].data = np.eye(k) + stream(seed, _INIT_T, key).uniform(-0.01, 0.01, (k, k))
    for i, name in enumerate(("V0", "V1")):
        shape = p[name].shape
        lim = 1.0 / np.sqrt(shape[1])
        p[name].data = stream(seed, _INIT_ATTN, key, i).uniform(-lim, lim, shape)
    i = 0
    while f"L{i}.w" in p:
        shape = p[f"L{i}.w"].shape
        lim = np.sqrt(6.0 / shape[0])
        p[f"L{i}.w"].data = stream(seed, _INIT_DEEP, key, i).uniform(-lim, lim, shape)
        i += 1
    q = p["Q"].shape[0]
    p["Q"].data = stream(seed, _INIT_HEAD, key).uniform(-1.0 / np.sqrt(q), 1.0 / np.sqrt(q), q)
    for name in ("b0", "b1", "z") + tuple(f"L{j}.b" for j in range(i)):
        p[name].data = np.zeros_like(p[name].data)
    return model


def lookup_embeddings(model: DomainModel, shared: SharedEmbedding | None, batch: ClickBatch
                      ) -> tuple[Tensor | None, Tensor | None, Tensor | None]:
    """(E_c, G_c, E_d); G_c is None when the model does not read the shared table."""
    if batch.domain != model.name:
        raise SchemaError(f"batch of domain {batch.domain} fed to model {model.name}")
    W = model.params["W"]
    E_c = ad.gather_rows(W, batch.dse_trans) if model.m else None
    E_d = ad.gather_rows(W, batch.dse_specific) if len(model.spec_cols) else None
    G_c = None
    if model.mode != "base" and model.m:
        if shared is None or batch.gse_trans is None:
            raise SchemaError(f"domain {model.name}: mode {model.mode} needs the shared table")
        G_c = ad.gather_rows(shared.W_g, batch.gse_trans)
    return E_c, G_c, E_d


def map_gse(model: DomainModel, G_c: Tensor) -> Tensor:
    """Apply the transfer matrix to every row: g -> T g."""
    return ad.matmul(G_c, ad.transpose(model.params["T"]))


def attention_gate(model: DomainModel, E_c: Tensor, G_c: Tensor) -> Tensor:
    p = model.params
    x = ad.concat([E_c, ad.mul(E_c, G_c), ad.add(E_c, G_c), G_c], axis=1)
    h0 = ad.relu(ad.add_bias(ad.matmul(x, ad.transpose(p["V0"])), p["b0"]))
    return ad.sigmoid(ad.add_bias(ad.matmul(h0, ad.transpose(p["V1"])), p["b1"]))


def combine(model: DomainModel, E_c: Tensor, G_c: Tensor | None, gate_override: float | None = None
            ) -> tuple[Tensor, Tensor | None, Tensor | None]:
    """Combined embedding plus the (mapped G, A) used to build it."""
    gate = gate_override
    if gate is None and model.mode == "base":
        gate = 1.0
    elif gate is None and model.mode == "no_attention":
        gate = 0.5
    if gate == 1.0 or G_c is None:
        return E_c, None, None
    mapped = map_gse(model, G_c)
    if gate is not None:
        A = Tensor(np.full(E_c.shape, float(gate)))
    else:
        A = attention_gate(model, E_c, mapped if model.config.gate_uses_mapped else G_c)
    E = ad.add(ad.mul(E_c, A), ad.mul(mapped, ad.one_minus(A)))
    return E, mapped, A


def forward(model: DomainModel, shared: SharedEmbedding | None, batch: ClickBatch,
            gate_override: float | None = None) -> ForwardTrace:
    B = len(batch)
    k = model.k
    p = model.params
    E_c, G_c, E_d = lookup_embeddings(model, shared, batch)
    parts = []
    E = mapped = A = None
    if E_c is not None:
        E, mapped, A = combine(model, E_c, G_c, gate_override)
        parts.append(ad.reshape(E, (B, model.m * k)))
    if E_d is not None:
        parts.append(ad.reshape(E_d, (B, len(model.spec_cols) * k)))
    x0 = ad.concat(parts, axis=1)
    h = x0
    i = 0
    while f"L{i}.w" in p:
        h = ad.relu(ad.add_bias(ad.matmul(h, p[f"L{i}.w"]), p[f"L{i}.b"]))
        i += 1
    q = p["Q"]
    logit = ad.add_bias(ad.matmul(h, ad.reshape(q, (q.shape[0], 1))), p["z"])
    p_hat = ad.reshape(ad.sigmoid(logit), (B,))
    return ForwardTrace(E_c, G_c, mapped, A, E, E_d, x0, h, p_hat)


def prediction_loss(predictions: Tensor, labels) -> Tensor:
    y = np.asarray(labels, dtype=np.float64)
    if y.size == 0:
        raise ValueError("prediction_loss: empty batch")
    if y.shape != predictions.shape:
        raise ValueError(f"prediction_loss: {predictions.shape} predictions vs {y.shape} labels")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("prediction_loss: labels must be 0/1")
    return ad.binary_cross_entropy(predictions, y)


def auxiliary_loss(model: DomainModel, E_c: Tensor | None, G_c: Tensor | None, lam: float,
                   full_gradient: bool = False) -> Tensor:
    """lam * mean over (record, field) of ||E_c - T g||^2.

    By default only T receives gradient from this term.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if lam == 0 or E_c is None or G_c is None:
        return Tensor(0.0)
    if not full_gradient:
        E_c, G_c = E_c.detach(), G_c.detach()
    diff = ad.sub(E_c, map_gse(model, G_c))
    return ad.scale(ad.sum_squares(diff), lam / E_c.shape[0])


def total_loss(per_domain) -> Tensor:
    """Sum of alpha_i * (Loss_i + L*_i); L*_i already carries lambda."""
    terms = []
    for loss_i, aux_i, alpha in per_domain:
        if alpha < 0:
            raise ValueError("alpha must be >= 0")
        terms.append(ad.scale(ad.add(ad.as_tensor(loss_i), ad.as_tensor(aux_i)), alpha))
    return ad.add_scalars(terms)


def fit_transfer_matrix(E_c: np.ndarray, G_c: np.ndarray, steps: int = 5000, lr: float = 0.5,
                        tol: float = 0.0) -> tuple[np.ndarray, list[float]]:
    """Gradient descent on mean ||E_c - T g||^2 over T, starting from identity."""
    k = E_c.shape[1]
    T = Tensor(np.eye(k), requires_grad=True)
    e, g = Tensor(E_c), Tensor(G_c)
    history = []
    for _ in range(steps):
        T.zero_grad()
        loss = ad.scale(ad.sum_squares(ad.sub(e, ad.matmul(g, ad.transpose(T)))), 1.0 / E_c.shape[0])
        loss.backward()
        history.append(loss.item())
        if history[-1] <= tol:
            break
        T.data = T.data - lr * T.grad
    return T.data, history


def build_models(schema: GlobalSchema, config: ModelConfig, seed: int, modes: dict[str, str] | None = None,
                 with_shared: bool = False) -> tuple[SharedEmbedding | None, dict[str, DomainModel]]:
    """One model per domain of ``schema`` plus the shared table.

    The table is None when no model reads it, unless ``with_shared`` asks for
    it anyway (base-mode checkpoints keep an untouched copy).
    """
    modes = modes or {}
    models = {}
    for spec in schema.domains:
        cfg = replace(config, mode=modes.get(spec.name, config.mode))
        models[spec.name] = DomainModel(spec, schema, cfg, seed)
    needs_shared = any(m.mode != "base" and m.m for m in models.values())
    shared = SharedEmbedding(schema, config.embedding_dim, seed) if needs_shared or with_shared else None
    return shared, models
