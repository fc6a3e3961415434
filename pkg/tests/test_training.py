import math
from dataclasses import replace

import numpy as np
import pytest

from cdtm.checkpoint import load_checkpoint, save_checkpoint
from cdtm.errors import CheckpointError, TrainingError
from cdtm.model import ModelConfig, build_models
from cdtm.schema import build_schema
from cdtm.selftest import tiny_schema
from cdtm.synth import GeneratorConfig, generate
from cdtm.training import AdamSlot, BatchScheduler, TrainConfig, TrainState, adam_step, train

MCFG = ModelConfig(embedding_dim=4, attention_hidden=3, hidden_sizes=(8, 6))


def setup(seed=0, n_rows=256, mode="full", schema=None, **train_kw):
    schema = schema or tiny_schema()
    schema = build_schema({"domains": [{**d.to_dict(), "n_rows": n_rows} for d in schema.domains]})
    data, _ = generate(schema, 0)
    shared, models = build_models(schema, replace(MCFG, mode=mode), seed)
    cfg = TrainConfig(batch_size=16, steps=40, seed=seed, **train_kw)
    return schema, data, shared, models, cfg


def snapshot(shared, models):
    out = {f"{n}/{p}": t.data.copy() for n, m in models.items() for p, t in m.params.items()}
    if shared is not None:
        out["W_g"] = shared.W_g.data.copy()
    return out


# -- Adam -----------------------------------------------------------------

def reference_adam(theta, grads, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
    return theta


def test_adam_first_step_is_learning_rate():
    cfg = TrainConfig()
    p = np.array([0.0])
    adam_step(p, np.array([1.0]), AdamSlot(np.zeros(1), np.zeros(1)), cfg)
    assert abs(abs(p[0]) - cfg.learning_rate) < 1e-6
    assert p[0] == pytest.approx(reference_adam(0.0, [1.0]), abs=1e-15)


def test_adam_matches_reference_over_many_steps():
    cfg = TrainConfig(learning_rate=0.01)
    grads = np.random.default_rng(0).normal(size=50)
    p = np.array([0.3])
    slot = AdamSlot(np.zeros(1), np.zeros(1))
    for g in grads:
        adam_step(p, np.array([g]), slot, cfg)
    assert p[0] == pytest.approx(reference_adam(0.3, grads, lr=0.01), abs=1e-12)
    assert slot.t == 50


def test_adam_zero_gradient_leaves_parameters_unchanged():
    p = np.array([1.5, -2.0])
    before = p.copy()
    adam_step(p, np.zeros(2), AdamSlot(np.zeros(2), np.zeros(2)), TrainConfig())
    assert np.array_equal(p, before)


def test_sparse_adam_untouched_rows_bit_identical():
    rng = np.random.default_rng(1)
    table = rng.normal(size=(6, 3))
    slot = AdamSlot(rng.random((6, 3)), rng.random((6, 3)), t=4)
    before, m_before = table.copy(), slot.m.copy()
    grad = np.zeros((6, 3))
    grad[[1, 4]] = rng.normal(size=(2, 3))
    adam_step(table, grad, slot, TrainConfig(), rows=np.array([1, 4]))
    untouched = [0, 2, 3, 5]
    assert np.array_equal(table[untouched], before[untouched])
    assert np.array_equal(slot.m[untouched], m_before[untouched])
    assert not np.array_equal(table[[1, 4]], before[[1, 4]])


def test_train_config_validation():
    for bad in ({"learning_rate": 0}, {"batch_size": 0}, {"alphas": {"A": -1.0}}, {"scheduling": "random"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- scheduling -----------------------------------------------------------

def test_round_robin_alternates():
    s = BatchScheduler({"A": 50, "B": 50}, 8, "round_robin", 0)
    names = [next(s)[0] for _ in range(10)]
    assert names == ["A", "B"] * 5


def test_proportional_draw_fraction():
    s = BatchScheduler({"big": 9000, "small": 1000}, 8, "proportional", 3)
    names = [next(s)[0] for _ in range(10_000)]
    assert abs(names.count("big") / 10_000 - 0.9) <= 0.02


def test_scheduler_deterministic_and_order_free():
    a = BatchScheduler({"A": 40, "B": 70}, 8, "proportional", 5)
    b = BatchScheduler({"B": 70, "A": 40}, 8, "proportional", 5)
    for _ in range(60):
        (na, ra), (nb, rb) = next(a), next(b)
        assert na == nb and np.array_equal(ra, rb)


def test_epochs_are_shuffles_without_replacement():
    s = BatchScheduler({"A": 50}, 8, "round_robin", 2)
    first = np.concatenate([next(s)[1] for _ in range(7)])
    assert sorted(first) == list(range(50))
    second = np.concatenate([next(s)[1] for _ in range(7)])
    assert sorted(second) == list(range(50))
    assert not np.array_equal(first, second)


def test_scheduler_resume_continues_stream():
    full = BatchScheduler({"A": 40, "B": 70}, 8, "proportional", 5)
    seq = [next(full) for _ in range(30)]
    part = BatchScheduler({"A": 40, "B": 70}, 8, "proportional", 5)
    for _ in range(12):
        next(part)
    resumed = BatchScheduler({"A": 40, "B": 70}, 8, "proportional", 5, step=part.step,
                             batches_seen=part.batches_seen)
    for want in seq[12:]:
        got = next(resumed)
        assert got[0] == want[0] and np.array_equal(got[1], want[1])


def test_scheduler_rejects_empty_dataset():
    with pytest.raises(ValueError):
        BatchScheduler({"A": 0, "B": 4}, 2, "round_robin", 0)


# -- training loop --------------------------------------------------------

def test_isolation_and_sharing():
    schema, data, shared, models, cfg = setup()
    state = TrainState()
    before = snapshot(shared, models)
    # run until exactly one batch has been taken from A
    sched = BatchScheduler({n: len(d) for n, d in data.items()}, cfg.batch_size, cfg.scheduling, cfg.seed)
    first_domain, rows = next(sched)
    other = "B" if first_domain == "A" else "A"
    train(shared, models, data, cfg, state=state, steps=1)
    after = snapshot(shared, models)
    for p in models[other].params:
        assert np.array_equal(after[f"{other}/{p}"], before[f"{other}/{p}"]), p
    assert any(not np.array_equal(after[f"{first_domain}/{p}"], before[f"{first_domain}/{p}"])
               for p in models[first_domain].params)
    m = models[first_domain]
    touched = np.unique(m.encode_dataset(data[first_domain], rows).gse_trans)
    changed = np.flatnonzero(np.any(after["W_g"] != before["W_g"], axis=1))
    assert set(changed) == set(touched)


def test_alpha_zero_sources_match_single_domain_training():
    schema, data, shared, models, cfg = setup(mode="base", lam=0.0, alphas={"A": 1.0, "B": 0.0})
    state = train(shared, models, data, cfg)
    # single-domain run, replaying the same domain schedule with only A's batches applied
    _, solo = build_models(schema.subset(["A"]), replace(MCFG, mode="base"), cfg.seed)
    solo_state = TrainState()
    sched = BatchScheduler({n: len(d) for n, d in data.items()}, cfg.batch_size, cfg.scheduling, cfg.seed)
    from cdtm.training import train_step
    for _ in range(cfg.steps):
        name, rows = next(sched)
        if name == "A":
            train_step(solo["A"], None, data["A"], rows, cfg, solo_state)
    for p in solo["A"].params:
        assert np.array_equal(solo["A"][p].data, models["A"][p].data), p
    a_losses = [h[2] for h in state.history if h[1] == "A"]
    assert len(a_losses) > 5


def test_alpha_zero_leaves_domain_frozen():
    schema, data, shared, models, cfg = setup(alphas={"B": 0.0})
    before = snapshot(shared, models)
    train(shared, models, data, cfg)
    after = snapshot(shared, models)
    assert all(np.array_equal(before[k], after[k]) for k in before if k.startswith("B/"))


@pytest.mark.parametrize("seed", range(5))
def test_short_training_lowers_loss(seed):
    schema, data, shared, models, cfg = setup(seed=seed, n_rows=2000)
    cfg = replace(cfg, steps=200, batch_size=32, learning_rate=0.01)
    state = train(shared, models, data, cfg)
    for n in models:
        losses = [h[2] for h in state.history if h[1] == n]
        assert np.mean(losses[-20:]) < np.mean(losses[:5]), n


def test_nonfinite_loss_aborts_with_diagnostic():
    schema, data, shared, models, cfg = setup()
    for m in models.values():
        m["Q"].data[:] = np.nan
    with pytest.raises(TrainingError, match=r"step 0 in domain"):
        train(shared, models, data, cfg)


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        _, data, shared, models, cfg = setup(seed=3)
        train(shared, models, data, cfg)
        runs.append(snapshot(shared, models))
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


def test_symmetry_under_domain_reordering():
    schema = tiny_schema()
    flipped = build_schema({"domains": [d.to_dict() for d in reversed(schema.domains)]})
    results = []
    for s in (schema, flipped):
        _, data, shared, models, cfg = setup(seed=1, schema=s)
        state = train(shared, models, data, cfg)
        results.append((state.history, snapshot(shared, models)))
    (h1, p1), (h2, p2) = results
    assert h1 == h2
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)


def test_aux_alignment_history_recorded():
    _, data, shared, models, cfg = setup()
    state = train(shared, models, data, cfg)
    for step, name, loss, aux, dist in state.history:
        assert aux == pytest.approx(cfg.lam * dist, rel=1e-9)


# -- checkpoints ----------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    schema, data, shared, models, cfg = setup()
    state = train(shared, models, data, cfg, steps=15)
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, schema, MCFG, shared, models, state)
    ck = load_checkpoint(path, expected_fingerprint=schema.fingerprint())
    assert snapshot(ck.shared, ck.models).keys() == snapshot(shared, models).keys()
    for k, v in snapshot(shared, models).items():
        assert np.array_equal(snapshot(ck.shared, ck.models)[k], v)
    assert ck.state.step == state.step and ck.state.batches_seen == state.batches_seen
    for k, slot in state.slots.items():
        assert np.array_equal(ck.state.slots[k].m, slot.m) and ck.state.slots[k].t == slot.t
    assert ck.state.history == state.history


def test_checkpoint_layout(tmp_path):
    schema, data, shared, models, cfg = setup()
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, schema, MCFG, shared, models, TrainState())
    buf = path.read_bytes()
    assert buf[:7] == b"CDTMCK1"
    import json
    header = json.loads(buf[15:15 + int.from_bytes(buf[7:15], "little")])
    names = [b["name"] for b in header["blocks"]]
    assert names[0] == "W_g"
    assert names[1:8] == ["A/W", "A/T", "A/V0", "A/b0", "A/V1", "A/b1", "A/L0.w"]
    assert header["k"] == 4 and header["d_h"] == 3 and header["mode"] == "full"


def test_resume_reproduces_uninterrupted_run(tmp_path):
    _, data, shared, models, cfg = setup(seed=2)
    full = train(shared, models, data, replace(cfg, steps=100))
    want = snapshot(shared, models)

    schema, data, shared, models, cfg = setup(seed=2)
    cfg = replace(cfg, steps=100)
    half = train(shared, models, data, cfg, steps=50)
    save_checkpoint(tmp_path / "c.ckpt", schema, MCFG, shared, models, half)
    ck = load_checkpoint(tmp_path / "c.ckpt")
    resumed = train(ck.shared, ck.models, data, cfg, state=ck.state)
    assert resumed.history == full.history
    got = snapshot(ck.shared, ck.models)
    assert all(np.array_equal(got[k], want[k]) for k in want)


def test_checkpoint_refuses_other_schema(tmp_path):
    schema, data, shared, models, cfg = setup()
    save_checkpoint(tmp_path / "a.ckpt", schema, MCFG, shared, models, TrainState())
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_checkpoint(tmp_path / "a.ckpt", expected_fingerprint="0" * 16)


def test_checkpoint_rejects_corruption(tmp_path):
    schema, data, shared, models, cfg = setup()
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, schema, MCFG, shared, models, TrainState())
    buf = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(buf[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"XXXXXXX" + buf[7:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_base_mode_checkpoint_keeps_initial_shared_rows(tmp_path):
    schema, data, _, _, cfg = setup()
    shared, models = build_models(schema, replace(MCFG, mode="base"), cfg.seed, with_shared=True)
    init = shared.W_g.data.copy()
    state = train(shared, models, data, cfg)
    path = tmp_path / "b.ckpt"
    save_checkpoint(path, schema, replace(MCFG, mode="base"), shared, models, state)
    assert np.array_equal(load_checkpoint(path).shared.W_g.data, init)
    assert "shared/W_g" not in state.slots
