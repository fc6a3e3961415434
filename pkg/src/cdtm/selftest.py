"""Built-in property checks run by ``cdtm selftest``."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import autodiff as ad
from .metrics import auc, imp, pairwise_auc
from .model import (ModelConfig, auxiliary_loss, build_models, combine, fit_transfer_matrix, forward,
                    prediction_loss, total_loss)
from .schema import build_schema
from .synth import generate


def _tf(fid, gid, v):
    return {"field_id": fid, "kind": "transferable", "global_field_id": gid, "vocab_size": v}


def _nf(fid, v):
    return {"field_id": fid, "kind": "nontransferable", "vocab_size": v}


def tiny_schema():
    """Two small domains sharing two global fields, with different field layouts."""
    return build_schema({"domains": [
        {"name": "A", "domain_id": 0, "n_rows": 64, "base_ctr": 0.4,
         "fields": [_tf(0, 0, 5), _tf(1, 1, 4), _nf(2, 3)]},
        {"name": "B", "domain_id": 1, "n_rows": 64, "base_ctr": 0.3,
         "fields": [_tf(0, 0, 5), _nf(3, 3), _tf(1, 1, 4), _nf(4, 2)]},
    ]})


def cdtm_loss_setup(seed: int, mode: str = "full", full_gradient: bool = True, lam: float = 0.3,
                    batch: int = 4, k: int = 3):
    """Tiny two-domain CDTM plus closures computing the joint loss.

    Returns ``(f, grad_f, params, models, shared, batches)``. With
    ``full_gradient=False``, ``grad_f`` runs the stop-gradient auxiliary path and
    ``f`` re-evaluates the loss with the auxiliary-term embeddings frozen at the
    current point, which is the function that path differentiates.
    """
    schema = tiny_schema()
    data, _ = generate(schema, seed)
    cfg = ModelConfig(embedding_dim=k, attention_hidden=4, hidden_sizes=(6, 5), mode=mode)
    shared, models = build_models(schema, cfg, seed)
    rng = np.random.default_rng(seed)
    biases = []
    for m in models.values():
        for name in ("b0", "b1", "L0.b", "L1.b", "z"):
            m[name].data = rng.uniform(-0.3, 0.3, m[name].shape)
        biases += [m["b0"], m["L0.b"], m["L1.b"]]
    batches = {n: models[n].encode_dataset(data[n], np.arange(batch)) for n in models}
    alphas = {"A": 1.0, "B": 0.7}
    frozen: dict[str, tuple] = {}

    def loss(stop_gradient: bool = False, use_frozen: bool = False):
        terms = []
        for n, m in models.items():
            tr = forward(m, shared, batches[n])
            e_c, g_c = frozen.get(n, (tr.E_c, tr.G_c)) if use_frozen else (tr.E_c, tr.G_c)
            aux = auxiliary_loss(m, e_c, g_c, lam, full_gradient=not stop_gradient)
            terms.append((prediction_loss(tr.p_hat, batches[n].labels), aux, alphas[n]))
        return total_loss(terms)

    def freeze():
        for n, m in models.items():
            tr = forward(m, shared, batches[n])
            if tr.G_c is not None:
                frozen[n] = (ad.Tensor(tr.E_c.data.copy()), ad.Tensor(tr.G_c.data.copy()))

    ad.nudge_from_kinks(loss, biases)
    params = {f"{n}/{p}": t for n, m in models.items() for p, t in m.params.items()}
    if shared is not None:
        params["W_g"] = shared.W_g
    if full_gradient:
        return loss, loss, params, models, shared, batches
    freeze()
    return (lambda: loss(use_frozen=True)), (lambda: loss(stop_gradient=True)), params, models, shared, batches


def check_gradient_suite(seeds=(0, 1, 2), tol: float = 1e-4) -> tuple[bool, str]:
    worst = 0.0
    for seed in seeds:
        for full in (True, False):
            f, grad_f, params, *_ = cdtm_loss_setup(seed, full_gradient=full)
            r = ad.check_gradients(f, params, eps=1e-5, tol=tol, grad_f=grad_f)
            worst = max(worst, r.max_rel_error)
    return worst < tol, f"max relative error {worst:.2e}"


def check_auc_oracle(n_instances: int = 100, max_n: int = 1000, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(2, max_n + 1))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, max(2, n // 4), n) / 7.0
        worst = max(worst, abs(auc(scores, labels) - pairwise_auc(scores, labels)))
    return worst <= 1e-12, f"max |fast - pairwise| {worst:.1e}"


def check_combination_identities(seed: int = 0) -> tuple[bool, str]:
    *_, models, shared, batches = cdtm_loss_setup(seed)
    m, b = models["A"], batches["A"]
    before = forward(m, shared, b, gate_override=1.0).p_hat.data.copy()
    saved = shared.W_g.data.copy(), m["T"].data.copy()
    rng = np.random.default_rng(seed + 1)
    shared.W_g.data = shared.W_g.data + rng.normal(0, 5, shared.W_g.shape)
    m["T"].data = rng.normal(0, 5, m["T"].shape)
    after = forward(m, shared, b, gate_override=1.0).p_hat.data
    shared.W_g.data, m["T"].data = saved
    ok1 = np.array_equal(before, after)
    m["T"].data = np.eye(m.k)
    tr = forward(m, shared, b)
    E, _, _ = combine(m, tr.E_c, tr.G_c, gate_override=0.0)
    ok2 = np.array_equal(E.data, tr.G_c.data)
    m["T"].data = saved[1]
    return ok1 and ok2, f"A=1 invariant: {ok1}, A=0,T=I gives G_c: {ok2}"


def rotation_problem(seed: int = 0, n: int = 64, angle: float = 0.7):
    rng = np.random.default_rng(seed)
    R = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    G = rng.normal(size=(n, 2))
    return G @ R.T, G, R


def check_transfer_recovery(steps: int = 5000) -> tuple[bool, str]:
    E, G, R = rotation_problem()
    T, hist = fit_transfer_matrix(E, G, steps=steps, lr=0.5)
    final = float(np.mean(np.sum((E - G @ T.T) ** 2, axis=1)))
    err = float(np.linalg.norm(T - R))
    return err < 1e-3 and final < 1e-6, f"||T-R||_F {err:.1e}, mean distance {final:.1e}, {len(hist)} steps"


def check_imp_arithmetic() -> tuple[bool, str]:
    a, b = imp(0.5987, 0.5778), imp(0.5977, 0.5893)
    return abs(a - 3.62) <= 0.005 and abs(b - 1.43) <= 0.005, f"{a:.4f}%, {b:.4f}%"


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("gradient check vs finite differences", check_gradient_suite),
    ("AUC equals pairwise oracle", check_auc_oracle),
    ("combination gate identities", check_combination_identities),
    ("transfer-matrix recovery", check_transfer_recovery),
    ("Imp arithmetic", check_imp_arithmetic),
]


def run(echo=print) -> bool:
    ok_all = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        ok_all &= ok
        echo(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail}; {time.perf_counter() - t0:.1f}s)")
    return ok_all
