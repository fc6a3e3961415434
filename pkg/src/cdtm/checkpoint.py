"""Checkpoint files.

Layout (little-endian)::

    b"CDTMCK1"
    u64 header length, then a UTF-8 JSON header
    float64 blocks in the order listed by header["blocks"]

Parameter blocks come first (shared table, then for each domain its table,
transfer matrix, attention, deep layers and head). Adam moments follow, so a
loaded checkpoint resumes training bit-for-bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import DomainModel, ModelConfig, SharedEmbedding, build_models
from .schema import GlobalSchema
from .training import AdamSlot, TrainState

MAGIC = b"CDTMCK1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    schema: GlobalSchema
    config: ModelConfig
    shared: SharedEmbedding | None
    models: dict[str, DomainModel]
    state: TrainState
    header: dict


def _param_blocks(shared, models):
    if shared is not None:
        yield "W_g", shared.W_g.data
    for name, model in models.items():
        for pname, t in model.params.items():
            yield f"{name}/{pname}", t.data


def save_checkpoint(path: str | Path, schema: GlobalSchema, config: ModelConfig,
                    shared: SharedEmbedding | None, models: dict[str, DomainModel], state: TrainState,
                    extra: dict | None = None) -> None:
    blocks = list(_param_blocks(shared, models))
    slot_keys = sorted(state.slots)
    for key in slot_keys:
        blocks.append((f"adam.m/{key}", state.slots[key].m))
        blocks.append((f"adam.v/{key}", state.slots[key].v))
    header = {
        "version": FORMAT_VERSION,
        "schema_fingerprint": schema.fingerprint(),
        "schema": schema.to_dict(),
        "k": config.embedding_dim,
        "d_h": config.attention_hidden,
        "hidden_sizes": list(config.hidden_sizes),
        "mode": config.mode,
        "modes": {n: m.mode for n, m in models.items()},
        "flags": {"gate_uses_mapped": config.gate_uses_mapped},
        "has_shared": shared is not None,
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
        "state": {
            "step": state.step,
            "batches_seen": state.batches_seen,
            "adam_t": {k: state.slots[k].t for k in slot_keys},
            "history": [list(h) for h in state.history],
        },
        **(extra or {}),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_header(buf: bytes) -> tuple[dict, int]:
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint: magic bytes CDTMCK1 absent")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    try:
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint header: {e}") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    return header, pos + hlen


def load_checkpoint(path: str | Path, expected_fingerprint: str | None = None) -> Checkpoint:
    buf = Path(path).read_bytes()
    header, pos = read_header(buf)
    if expected_fingerprint is not None and header["schema_fingerprint"] != expected_fingerprint:
        raise CheckpointError(f"checkpoint schema fingerprint {header['schema_fingerprint']} does not match "
                              f"expected {expected_fingerprint}")
    schema = GlobalSchema.from_dict(header["schema"])
    if schema.fingerprint() != header["schema_fingerprint"]:
        raise CheckpointError("checkpoint schema does not hash to its recorded fingerprint")
    config = ModelConfig(embedding_dim=header["k"], attention_hidden=header["d_h"],
                         hidden_sizes=tuple(header["hidden_sizes"]), mode=header["mode"],
                         gate_uses_mapped=header["flags"]["gate_uses_mapped"])
    shared, models = build_models(schema, config, 0, modes=header["modes"], with_shared=header["has_shared"])
    if not header["has_shared"]:
        shared = None

    arrays: dict[str, np.ndarray] = {}
    for spec in header["blocks"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        if len(buf) < pos + 8 * n:
            raise CheckpointError(f"checkpoint truncated in block {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes in checkpoint")

    for name, data in _param_blocks(shared, models):
        if name not in arrays or arrays[name].shape != data.shape:
            raise CheckpointError(f"checkpoint block {name} missing or mis-shaped")
    if shared is not None:
        shared.W_g.data = arrays["W_g"]
    for name, model in models.items():
        for pname, t in model.params.items():
            t.data = arrays[f"{name}/{pname}"]

    st = header["state"]
    state = TrainState(step=st["step"], batches_seen=dict(st["batches_seen"]))
    for key, t in st["adam_t"].items():
        state.slots[key] = AdamSlot(arrays[f"adam.m/{key}"], arrays[f"adam.v/{key}"], int(t))
    state.history = [(int(h[0]), str(h[1]), float(h[2]), float(h[3]), float(h[4])) for h in st["history"]]
    return Checkpoint(schema, config, shared, models, state, header)
