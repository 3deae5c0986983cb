"""Acceptance criteria 1-11, one test each.

Every test records a PASS/FAIL line that is printed in the pytest terminal
summary. Criteria 6-9 and 11 train models and take several minutes; select
the rest with ``-m "not slow"``.
"""
import itertools
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from mose import autodiff as ad
from mose import ot
from mose.autodiff import Tape
from mose.losses import assemble_loss, pairwise_cost
from mose.metrics import evaluate, ged, iou_matrix, m_iou
from mose.model import EmpiricalDistribution as ED
from mose.model import ModelConfig, MoseModel
from mose.train import Trainer
from oracles import brute_assignment, loop_ged, lp_vertices

# Median relative greedy gap of the first oracle run:
# `python scripts/greedy_gap.py --seed 0 --instances 1000` -> median 0.0 (mean 0.0203).
FROZEN_GREEDY_MEDIAN_GAP = 0.0


def record(n: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (title, bool(ok), detail)
    assert ok, f"criterion {n} ({title}) failed: {detail}"


# ---------------------------------------------------------------- solvers


def test_01_gamma_one_exactness():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n, m = rng.integers(1, 9), rng.integers(1, 5)
        C, v = rng.random((n, m)), rng.dirichlet(np.ones(m))
        fast = ot.solve_gamma_one(C, v).objective(C)
        exact = ot.solve_exact_lp(C, v, gamma=1.0).objective(C)
        worst = max(worst, abs(fast - exact))
    dt = time.perf_counter() - t0
    record(1, "solver exactness at gamma=1", worst <= 1e-12 and dt < 10,
           f"max |diff| {worst:.2e} (<= 1e-12), {dt:.2f} s (< 10 s)")


def test_02_greedy_feasibility_and_gap():
    from greedy_gap import instances

    infeasible, below_optimum, gaps = 0, 0, []
    for C, v, gamma in instances(1000, seed=2024):
        g = ot.solve_relaxed_greedy(C, v, gamma)
        infeasible += not g.check(v, tol=1e-9)
        e = ot.solve_exact_lp(C, v, gamma=gamma).objective(C)
        below_optimum += g.objective(C) < e - 1e-12
        gaps.append(0.0 if e == 0 else (g.objective(C) - e) / abs(e))
    mean_gap = float(np.mean(gaps))
    threshold = 2 * FROZEN_GREEDY_MEDIAN_GAP
    ok = infeasible == 0 and below_optimum == 0 and mean_gap <= threshold
    record(2, "greedy feasibility and gap", ok,
           f"{infeasible} infeasible, {below_optimum} below optimum, mean relative gap {mean_gap:.4f} "
           f"vs threshold 2 x frozen median = {threshold:.4f}")


def test_03_exact_lp_matches_vertex_enumeration():
    rng = np.random.default_rng(303)
    worst, count = 0.0, 0
    for n, m in itertools.product(range(1, 5), range(1, 5)):
        for _ in range(12):
            C, v = rng.random((n, m)), rng.dirichlet(np.ones(m))
            u = rng.dirichlet(np.ones(n))
            ref, _ = lp_vertices(C, v, u=u)
            worst = max(worst, abs(ot.solve_exact_lp(C, v, u=u).objective(C) - ref))
            gamma = rng.integers(1, n + 1) / n
            ref, _ = lp_vertices(C, v, gamma=gamma)
            worst = max(worst, abs(ot.solve_exact_lp(C, v, gamma=gamma).objective(C) - ref))
            count += 2
    record(3, "exact LP vs vertex enumeration", worst <= 1e-9, f"{count} instances, max |diff| {worst:.2e}")


def test_04_hungarian_matches_permutations():
    rng = np.random.default_rng(404)
    mismatches = 0
    for size in (4, 5):
        for _ in range(500):
            C = rng.random((size, size))
            assign, _ = ot.hungarian(C)
            got = sum(C[i, assign[i]] for i in range(size))
            mismatches += got != brute_assignment(C)[0]
    record(4, "Hungarian vs brute force", mismatches == 0, f"{mismatches} mismatches in 1000 instances")


# --------------------------------------------------------------- gradients


def _grid_model():
    cfg = ModelConfig(in_channels=2, height=4, width=4, num_classes=3, num_experts=2, latent_dim=2,
                      enc_features=4, dec_features=3, head_features=3, gate_hidden=4)
    model = MoseModel(cfg, seed=5)
    rng = np.random.default_rng(6)
    for k in model.gate_names():  # move off the zero-initialised gate so its gradient is non-trivial
        model.params[k].value = 0.5 * rng.standard_normal(model.params[k].shape)
    for k in model.params:  # zero biases put ReLU inputs exactly on the kink; check at a generic point
        if k.endswith(".b"):
            model.params[k].value = model.params[k].value + 0.1 * rng.standard_normal(model.params[k].shape)
    x = rng.normal(size=(1, 2, 4, 4))
    labels = rng.integers(0, 3, size=(1, 2, 16))
    v = np.array([[0.3, 0.7]])
    return model, x, labels, v


def _model_loss(model, x, labels, v, plans=None, solver="greedy"):
    logits, pi, _ = model.forward_compact(x, 2, np.random.default_rng(0))
    u = ad.mul(ad.repeat(pi, 2, axis=1), 0.5)
    return assemble_loss(pairwise_cost(logits, labels, "ce"), u, v, 1.0, 0.5, plans=plans, solver=solver)


def test_05_gradient_integrity():
    model, x, labels, v = _grid_model()
    plans = _model_loss(model, x, labels, v).plans
    worst = 0.0
    for name in list(model.params):
        param = model.params[name]

        def f(t, name=name, param=param):
            model.params[name] = t
            try:
                return _model_loss(model, x, labels, v, plans=plans).loss
            finally:
                model.params[name] = param

        worst = max(worst, ad.gradcheck(f, param.value, eps=1e-6))

    # tie-break perturbation: identical experts with sigma ~ 0 make every sample equal,
    # so all costs tie and any split of the label mass is an optimal P*
    model.params["prior.mean"].value[1] = model.params["prior.mean"].value[0]
    model.params["prior.scale_raw"].value[:] = -60.0
    for k in model.gate_names():
        model.params[k].value[:] = 0.0
    names = list(model.params)

    def grads(plans):
        with Tape() as tape:
            parts = _model_loss(model, x, labels, v, plans=plans)
        return parts.value, dict(zip(names, tape.gradient(parts.loss, [model.params[k] for k in names])))

    base = _model_loss(model, x, labels, v).plans[0]
    swapped = base[[2, 3, 0, 1]]  # hand expert 0's mass to expert 1 and back
    value, g_internal = grads(None)
    fixed_value, g_fixed = grads([base])
    detached = value == fixed_value and all(np.array_equal(g_internal[k], g_fixed[k]) for k in names)
    swap_value, g_swap = grads([swapped])
    shared = [k for k in names if not (k.startswith("prior") or k.startswith("gate"))]
    invariant = abs(swap_value - value) <= 1e-12 and all(
        np.allclose(g_swap[k], g_fixed[k], rtol=0, atol=1e-12) for k in shared)
    mirrored = (np.allclose(g_swap["prior.mean"], g_fixed["prior.mean"][::-1], rtol=0, atol=1e-12)
                and np.allclose(g_swap["gate3.w"], g_fixed["gate3.w"][:, ::-1], rtol=0, atol=1e-12))
    ok = worst <= 1e-4 and detached and invariant and mirrored
    record(5, "gradient integrity", ok,
           f"max gradcheck rel. error {worst:.2e} (<= 1e-4); solver-internal vs injected P*: "
           f"{'identical' if detached else 'DIFFER'}; tie-swapped P*: loss and shared-weight gradients "
           f"{'unchanged' if invariant else 'CHANGED'}, per-expert gradients "
           f"{'swapped' if mirrored else 'NOT swapped'}")


# ------------------------------------------------------------ trained model


@pytest.fixture(scope="module")
def preset_run():
    from common import load_preset

    ds, cfg = load_preset()
    t0 = time.perf_counter()
    trainer = Trainer(ds, cfg)
    log = trainer.fit()
    return ds, cfg, trainer.model, log, time.perf_counter() - t0


@pytest.fixture(scope="module")
def compact_report(preset_run):
    ds, cfg, model, _, _ = preset_run
    return evaluate(model, ds, "val", "compact", samples=cfg.num_samples, seed=0)


@pytest.mark.slow
def test_06_kl_vanishes(preset_run):
    _, _, _, log, _ = preset_run
    last = log[-1]
    record(6, "KL term after training", last["kl_max"] < 1e-3,
           f"max per-batch KL in the final epoch {last['kl_max']:.2e} (< 1e-3); "
           f"per-sample KL {last['kl_sample']:.3f} for reference")


@pytest.mark.slow
def test_07_calibration_recovery(preset_run, compact_report):
    ds, cfg, _, _, seconds = preset_run
    report, _ = compact_report
    probs = dict(zip(ds.spec.flip_pairs(), ds.spec.flip_probs))
    flip_err = max(abs(report.flip_ratio[p] - probs[p]) for p in probs)
    ok = report.mode_tv <= 0.05 and flip_err <= 0.03 and cfg.epochs <= 500
    flips = ", ".join(f"{a}->{b} {report.flip_ratio[(a, b)]:.3f}/{probs[(a, b)]:.3f}" for a, b in probs)
    record(7, "calibration recovery", ok,
           f"mode TV {report.mode_tv:.4f} (<= 0.05); flip ratios {flips}; max error {flip_err:.4f} (<= 0.03); "
           f"{cfg.epochs} epochs in {seconds / 60:.1f} min")


class _AllFlipped:
    """Confident predictor that always outputs the all-flipped label."""

    def __init__(self, ds):
        spec = ds.spec
        self.config = ModelConfig(in_channels=spec.channels, height=spec.height, width=spec.width,
                                  num_classes=spec.num_classes, num_experts=1)
        self.split = ds.val
        full = [m["id"] for m in ds.mode_table if all(m["bits"])][0]
        self.maps = np.stack([lab[list(mo).index(full)] for lab, mo in zip(self.split.labels, self.split.modes)])
        self.cursor = 0

    def predict_compact_batch(self, x, s, rng):
        out = [ED(self.maps[self.cursor + i][None], [1.0]) for i in range(len(x))]
        self.cursor += len(x)
        return out


@pytest.mark.slow
def test_08_ece(preset_run, compact_report):
    ds, _, _, _, _ = preset_run
    report, _ = compact_report
    degenerate, _ = evaluate(_AllFlipped(ds), ds, "val", "compact", samples=1)
    ok = report.ece <= 0.03 and degenerate.ece >= 0.5
    record(8, "ECE sanity", ok, f"trained ECE {report.ece:.4f} (<= 0.03); always-confident all-flipped "
                                f"predictor ECE {degenerate.ece:.4f} (>= 0.5)")


@pytest.mark.slow
def test_09_ablation_direction():
    from ablation import run_variant

    rows, ok = [], True
    for seed in (0, 1, 2):
        g = {name: run_variant(name, seed, epochs=100, n_train=64).ged
             for name in ("ot", "all_pairs", "uniform_gate")}
        ok &= g["ot"] < g["all_pairs"] and g["ot"] < g["uniform_gate"]
        rows.append(f"seed {seed}: ot {g['ot']:.3f} / all-pairs {g['all_pairs']:.3f} / "
                    f"uniform gate {g['uniform_gate']:.3f}")
    record(9, "ablation direction (val GED)", ok, "; ".join(rows))


# ------------------------------------------------------------------ metrics


def test_10_metric_oracles():
    rng = np.random.default_rng(1010)
    worst_ged = worst_miou = 0.0
    identities = True
    cls = [1, 2]
    for _ in range(200):
        sets = []
        for _ in range(2):
            n = rng.integers(1, 5)
            w = rng.dirichlet(np.ones(n)) if rng.random() < 0.5 else np.full(n, 1 / n)
            sets.append(ED(rng.integers(0, 3, size=(n, 3, 3)), w))
        a, b = sets
        worst_ged = max(worst_ged, abs(ged(a, b, cls) - loop_ged(a.maps, a.weights, b.maps, b.weights, cls)))
        ref, _ = lp_vertices(1 - iou_matrix(a.maps, b.maps, cls), b.weights, u=a.weights)
        worst_miou = max(worst_miou, abs(m_iou(a, b, cls) - (1 - ref)))
        identities &= ged(a, a, cls) == 0.0 and m_iou(a, a, cls) == 1.0
    ok = worst_ged <= 1e-9 and worst_miou <= 1e-9 and identities
    record(10, "metric oracles", ok, f"GED max |diff| {worst_ged:.2e}, M-IoU max |diff| {worst_miou:.2e}; "
                                     f"GED(mu,mu)=0 and M-IoU(mu,mu)=1 {'exact' if identities else 'VIOLATED'}")


@pytest.mark.slow
def test_11_representation_consistency(preset_run, compact_report):
    ds, cfg, model, _, _ = preset_run
    compact, _ = compact_report
    standard, _ = evaluate(model, ds, "val", "standard", samples=cfg.num_samples, seed=0)
    diff = abs(compact.ged - standard.ged)
    record(11, "compact vs standard GED", diff <= 0.03,
           f"N={cfg.num_samples}: compact {compact.ged:.4f}, standard {standard.ged:.4f}, |diff| {diff:.4f} (<= 0.03)")
