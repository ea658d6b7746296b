"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in an
"acceptance criteria" section at the end of the pytest output.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from sparsenn.arch import ArchConfig
from sparsenn.model import (
    NetworkParams,
    NetworkSpec,
    forward_dense,
    forward_fx_golden,
    forward_gated,
    quantize_network,
)
from sparsenn.sim import EnergyConfig, Simulator, energy_report, merge_reports, run_network
from sparsenn.train import (
    HyperParams,
    backward,
    init_params,
    loss_and_delta,
    objective,
    svd,
    train,
    truncated_svd,
)


def random_params(rng, sizes, rank, w_scale=1.0):
    spec = NetworkSpec.with_predictors(sizes, rank)
    W, U, V = [], [], []
    for l in range(spec.num_layers):
        m, n = spec.layer_shape(l)
        W.append(rng.normal(0, w_scale / np.sqrt(n), (m, n)))
        U.append(rng.normal(0, 0.5, (m, rank)) if spec.has_predictor(l) else None)
        V.append(rng.normal(0, 0.5 / np.sqrt(n), (rank, n)) if spec.has_predictor(l) else None)
    return NetworkParams(spec, W, U, V)


def random_sizes(rng, depth, lo, hi):
    return [int(s) for s in rng.integers(lo, hi + 1, depth + 1)]


def sparse_inputs(rng, count, n, density):
    return rng.random((count, n)) * (rng.random((count, n)) < density)


# -- 1. gradient oracle ------------------------------------------------------------------

def five_point(f, arr, h=1e-4):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        vals = []
        for k in (2, 1, -1, -2):
            arr[idx] = old + k * h
            vals.append(f())
        arr[idx] = old
        g[idx] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
    return g


def test_criterion_01_gradient_oracle(criterion):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    margin = 5e-3  # > the largest perturbation of any kink argument at h = 1e-4
    nets, worst = 0, 0.0
    while nets < 20:
        depth = int(rng.integers(2, 5))
        sizes = random_sizes(rng, depth, 4, 50)
        rank = min(int(rng.integers(1, 9)),
                   min(min(sizes[l], sizes[l + 1]) for l in range(depth - 1)) - 1)
        if rank < 1:
            continue
        params = random_params(rng, sizes, rank)
        x = rng.normal(0, 1, (1, sizes[0]))
        y = rng.integers(0, sizes[-1], 1)
        lam = float(rng.choice([0.0, 0.01]))
        penalize_all = bool(rng.integers(0, 2))
        cache = forward_gated(params, x, relaxed=True)
        spec = params.spec
        # stay away from the ReLU kink, the clip corners and (for the one-sided penalty) zero
        if any(np.abs(cache.pre[l]).min() < margin for l in range(depth - 1)):
            continue
        if any(np.abs(np.abs(cache.scores[l]) - 1).min() < margin for l in spec.predictor_layers):
            continue
        if not penalize_all and any(np.abs(cache.scores[l]).min() < margin for l in spec.predictor_layers):
            continue
        nets += 1
        _, delta = loss_and_delta(cache.logits, y)
        g = backward(params, cache, delta, lam, penalize_all, full_path=True)
        f = lambda: objective(params, x, y, lam, relaxed=True, penalize_all=penalize_all)
        pairs = [(g.dW[l], params.W[l]) for l in range(depth)]
        pairs += [(g.dU[l], params.U[l]) for l in spec.predictor_layers]
        pairs += [(g.dV[l], params.V[l]) for l in spec.predictor_layers]
        for analytic, arr in pairs:
            num = five_point(f, arr)
            # relative error with a 1e-7 floor: exact zeros meet ~1e-12 round-off
            rel = np.abs(analytic - num) / np.maximum(np.maximum(np.abs(analytic), np.abs(num)), 1e-7)
            worst = max(worst, float(rel.max()))
    elapsed = time.time() - t0
    ok = worst <= 1e-4 and elapsed < 60
    criterion(1, ok, f"{nets} nets, worst relative error {worst:.2e} (tol 1e-4), {elapsed:.1f}s")
    assert ok


# -- 2. golden equivalence -----------------------------------------------------------------

def test_criterion_02_golden_equivalence(criterion):
    t0 = time.time()
    rng = np.random.default_rng(7)
    cases = mismatches = 0
    for i in range(120):
        P = (4, 16, 64)[i % 3]
        mode = ("uv_on", "uv_off")[(i // 3) % 2]
        sizes = random_sizes(rng, int(rng.integers(1, 4)), 6, 96)
        narrow = min(min(sizes[l], sizes[l + 1]) for l in range(len(sizes) - 2)) if len(sizes) > 2 else 0
        rank = min(int(rng.integers(1, 9)), narrow - 1) if narrow > 1 else 0
        params = random_params(rng, sizes, rank, w_scale=float(rng.uniform(0.5, 2.0)))
        x = sparse_inputs(rng, 16, sizes[0], float(rng.uniform(0.2, 1.0)))
        qnet = quantize_network(params, x)
        codes = qnet.quantize_input(x[int(rng.integers(0, 16))])
        rep = run_network(qnet, codes, ArchConfig(num_pes=P), mode)
        gold = forward_fx_golden(qnet, codes, mode)
        same = all(np.array_equal(a, b) for a, b in zip(rep.outputs, gold.activations[1:]))
        same &= all(l.mask is None if m is None else np.array_equal(l.mask, m)
                    for l, m in zip(rep.layers, gold.masks))
        cases += 1
        mismatches += not same
    elapsed = time.time() - t0
    ok = mismatches == 0 and cases >= 100 and elapsed < 120
    criterion(2, ok, f"{cases} cases, {mismatches} mismatches, {elapsed:.1f}s")
    assert ok


# -- 3. order invariance -------------------------------------------------------------------

def test_criterion_03_order_invariance(criterion):
    rng = np.random.default_rng(11)
    cases = changed = 0
    cycle_diffs = 0
    for i in range(24):
        P = (4, 16, 64)[i % 3]
        sizes = random_sizes(rng, 3, 20, 80)
        params = random_params(rng, sizes, 4)
        x = sparse_inputs(rng, 8, sizes[0], 0.7)
        qnet = quantize_network(params, x)
        codes = qnet.quantize_input(x[0])
        base = run_network(qnet, codes, ArchConfig(num_pes=P), "uv_on")
        variants = [
            ArchConfig(num_pes=P, tie_break="high_port"),
            ArchConfig(num_pes=P, injection_order="descending"),
            ArchConfig(num_pes=P, injection_order="shuffled", injection_seed=i, tie_break="high_port"),
        ]
        for arch in variants:
            alt = run_network(qnet, codes, arch, "uv_on")
            cases += 1
            changed += not all(np.array_equal(a.outputs, b.outputs) and
                               (a.mask is None or np.array_equal(a.mask, b.mask))
                               for a, b in zip(base.layers, alt.layers))
            cycle_diffs += alt.total_cycles != base.total_cycles
    ok = changed == 0 and cases >= 20
    criterion(3, ok, f"{cases} perturbed runs, {changed} with changed outputs "
                     f"({cycle_diffs} with different cycle counts)")
    assert ok


# -- 4. uv_off degeneracy -----------------------------------------------------------------

def test_criterion_04_uv_off_degeneracy(criterion):
    rng = np.random.default_rng(13)
    float_ok = sim_ok = True
    for i in range(20):
        sizes = random_sizes(rng, 3, 10, 60)
        params = random_params(rng, sizes, 3)
        # positive U and V with non-negative inputs: every score is positive, mask all ones
        for l in params.spec.predictor_layers:
            params.U[l] = np.abs(params.U[l]) + 0.1
            params.V[l] = np.abs(params.V[l]) + 0.1
        x = rng.random((5, sizes[0])) + 0.01
        gated, dense = forward_gated(params, x), forward_dense(params, x)
        for l in params.spec.predictor_layers:
            float_ok &= bool(gated.mask(l).all())
        float_ok &= np.array_equal(gated.logits, dense.logits)
        float_ok &= all(np.array_equal(gated.output(l), dense.output(l)) for l in range(len(sizes) - 1))

        params = random_params(rng, sizes, 3)
        xs = sparse_inputs(rng, 8, sizes[0], 0.6)
        qnet = quantize_network(params, xs)
        codes = qnet.quantize_input(xs[1])
        rep = run_network(qnet, codes, ArchConfig(num_pes=(4, 16, 64)[i % 3]), "uv_off")
        gold = forward_fx_golden(qnet, codes, "uv_off")
        sim_ok &= all(np.array_equal(a, b) for a, b in zip(rep.outputs, gold.activations[1:]))
    ok = bool(float_ok and sim_ok)
    criterion(4, ok, f"all-ones gating == dense: {bool(float_ok)}; simulator uv_off == golden: {bool(sim_ok)}")
    assert ok


# -- 5. predictor overhead ------------------------------------------------------------------

def test_criterion_05_predictor_overhead(criterion):
    rng = np.random.default_rng(1)
    m = n = 1000
    r = 15
    # one 1000x1000 hidden layer followed by a small classifier
    sizes = [n, m, 10]
    spec = NetworkSpec.with_predictors(sizes, r)
    W = [rng.uniform(-1, 1, (m, n)) * np.sqrt(6 / (m + n)), rng.uniform(-1, 1, (10, m)) * np.sqrt(6 / (m + 10))]
    U = [rng.standard_normal((m, r)) / np.sqrt(r), None]
    V = [rng.standard_normal((r, n)) / np.sqrt(n), None]
    params = NetworkParams(spec, W, U, V)
    x = rng.random((20, n))
    qnet = quantize_network(params, x)
    codes = qnet.quantize_input(x[0])
    arch = ArchConfig(num_pes=64)
    on = run_network(qnet, codes, arch, "uv_on").layers[0]
    off = run_network(qnet, codes, arch, "uv_off").layers[0]
    vu = on.phases["V"].cycles + on.phases["U"].cycles
    w_off = off.phases["W"].cycles
    share = vu / w_off
    floor = r * (m + n) / (m * n)
    ok = share <= 0.06
    criterion(5, ok, f"(V+U)/W_off = ({on.phases['V'].cycles}+{on.phases['U'].cycles})/{w_off} = {share:.4f} "
                     f"(limit 0.06, analytic floor {floor:.3f})")
    assert ok


# -- shared five-layer network for 6 and 7 ---------------------------------------------------

DEEP_SIZES = (784, 256, 256, 256, 10)


@pytest.fixture(scope="module")
def deep5(mnist5k):
    train_ds, test_ds = mnist5k.split_at(4000, seed=0)
    params = init_params(NetworkSpec.with_predictors(DEEP_SIZES, 16), 0)
    rep = train(params, train_ds, HyperParams(learning_rate=0.1, l1_lambda=0.0005, epochs=10, seed=0), test_ds)
    qnet = quantize_network(params, train_ds.images[:500])
    samples = [qnet.quantize_input(test_ds.images[k]) for k in range(5)]
    return params, qnet, samples, rep.epochs[-1]


def isolated_w_cycles(qnet, l, a_codes, fmt, arch):
    """W-phase cycles of layer ``l`` on the same input, without and with the predicted mask."""
    layer = qnet.layers[l]
    off = Simulator(arch)
    off.load_input(a_codes)
    w_off = off.run_w_phase(layer, fmt, use_mask=False)
    on = Simulator(arch)
    on.load_input(a_codes)
    on.run_v_phase(layer, fmt)
    mask = on.run_u_phase(layer).outputs
    w_on = on.run_w_phase(layer, fmt, use_mask=True)
    return w_off, w_on, mask


# -- 6. cycle-reduction law ------------------------------------------------------------------

def test_criterion_06_cycle_reduction_law(criterion, deep5):
    params, qnet, samples, last = deep5
    P = 16
    arch = ArchConfig(num_pes=P)
    worst_dev = 0.0
    checks = 0
    for codes in samples:
        gold = forward_fx_golden(qnet, codes, "uv_on")
        fmt = qnet.in_fmt
        for l, layer in enumerate(qnet.layers):
            if layer.has_predictor:
                w_off, w_on, mask = isolated_w_cycles(qnet, l, gold.activations[l], fmt, arch)
                pop = max(int(mask[p::P].sum()) for p in range(P))
                rows = max(len(mask[p::P]) for p in range(P))
                law = 1 - pop / rows
                measured = 1 - w_on.cycles / w_off.cycles
                worst_dev = max(worst_dev, abs(measured - law))
                checks += 1
            fmt = layer.out_fmt
    law_ok = worst_dev <= 0.05

    on = merge_reports([run_network(qnet, c, arch, "uv_on") for c in samples])
    off = merge_reports([run_network(qnet, c, arch, "uv_off") for c in samples])
    red = [1 - ln.cycles / lo.cycles for lo, ln in zip(off.layers, on.layers)]
    hidden = len(DEEP_SIZES) - 2
    first_ok = 0.10 <= red[0] <= 0.31
    deeper_ok = all(red[l] > red[0] for l in range(1, hidden))
    ok = law_ok and first_ok and deeper_ok
    rho = ", ".join(f"{s:.2f}" for s in last.sparsity if s is not None)
    criterion(6, ok, f"law: {checks} layer runs, worst |measured - law| {worst_dev:.3f} (tol 0.05); "
                     f"per-layer reductions {', '.join(f'{r:.3f}' for r in red)} "
                     f"(layer 1 in [0.10, 0.31]: {first_ok}, deeper larger: {deeper_ok}); rho {rho}")
    assert ok


# -- 7. power ratio -------------------------------------------------------------------------

def test_criterion_07_power_ratio(criterion, deep5):
    params, qnet, samples, last = deep5
    arch = ArchConfig(num_pes=16)
    cfg = EnergyConfig(w_mem_read=20.0)  # W reads dominate
    on = merge_reports([run_network(qnet, c, arch, "uv_on") for c in samples])
    off = merge_reports([run_network(qnet, c, arch, "uv_off") for c in samples])
    ratio = energy_report(on, cfg).power_mw / energy_report(off, cfg).power_mw
    rho = np.mean([s for s in last.sparsity if s is not None])
    ratio_ok = abs(ratio - 0.5) <= 0.1

    # exact read law per layer on identical inputs
    law_ok, checks = True, 0
    for codes in samples:
        gold = forward_fx_golden(qnet, codes, "uv_on")
        fmt = qnet.in_fmt
        for l, layer in enumerate(qnet.layers):
            if layer.has_predictor:
                w_off, w_on, mask = isolated_w_cycles(qnet, l, gold.activations[l], fmt, arch)
                m = layer.shape[0]
                law_ok &= w_on.events.w_mem_reads * m == w_off.events.w_mem_reads * int(mask.sum())
                checks += 1
            fmt = layer.out_fmt
    ok = ratio_ok and law_ok
    criterion(7, ok, f"uv_on/uv_off power {ratio:.3f} at mean rho {rho:.2f} (target 0.5 +/- 0.1); "
                     f"w_mem_reads law exact on {checks} layer runs: {law_ok}")
    assert ok


# -- 8. V-phase utilization -----------------------------------------------------------------

def test_criterion_08_v_phase_utilization(criterion):
    rng = np.random.default_rng(3)
    r, P = 16, 64
    params = random_params(rng, [1024, 256, 10], r)
    x = rng.random((8, 1024)) + 0.01  # dense
    qnet = quantize_network(params, x)
    codes = qnet.quantize_input(x[0])
    util = {}
    for sched in ("column", "row"):
        sim = Simulator(ArchConfig(num_pes=P, v_schedule=sched))
        sim.load_input(codes)
        util[sched] = sim.run_v_phase(qnet.layers[0], qnet.in_fmt).utilization
    ok = util["column"] >= 0.9 and util["row"] <= r / P
    criterion(8, ok, f"column-scheduled busy fraction {util['column']:.3f} (>= 0.9), "
                     f"row-scheduled {util['row']:.3f} (<= {r / P:.2f})")
    assert ok


# -- 9. SVD correctness ---------------------------------------------------------------------

def test_criterion_09_svd(criterion):
    rng = np.random.default_rng(5)
    worst_err = worst_orth = worst_sv = 0.0
    # singular values of 3x3 matrices from the roots of det(tI - A^T A)
    for _ in range(20):
        A = rng.normal(0, 1, (3, 3))
        G = A.T @ A
        c1 = 0.5 * (np.trace(G) ** 2 - np.trace(G @ G))
        roots = np.sort(np.real(np.roots([1.0, -np.trace(G), c1, -np.linalg.det(G)])))[::-1]
        _, s, _ = svd(A)
        worst_sv = max(worst_sv, float(np.max(np.abs(s - np.sqrt(np.maximum(roots, 0))))))
    # larger matrices: LAPACK singular values as the independent reference
    for _ in range(20):
        m, n = (int(v) for v in rng.integers(4, 60, 2))
        A = rng.normal(0, 1, (m, n))
        ref = np.linalg.svd(A, compute_uv=False)
        Uf, s, Vt = svd(A)
        worst_sv = max(worst_sv, float(np.max(np.abs(s - ref))))
        k = min(m, n)
        worst_orth = max(worst_orth, float(np.abs(Uf.T @ Uf - np.eye(k)).max()),
                         float(np.abs(Vt @ Vt.T - np.eye(k)).max()))
        for r in range(1, k):
            U, V = truncated_svd(A, r)
            err = np.linalg.norm(A - U @ V)
            worst_err = max(worst_err, abs(err - float(np.sqrt(np.sum(ref[r:] ** 2)))))
    ok = worst_err <= 1e-8 and worst_orth <= 1e-8 and worst_sv <= 1e-8
    criterion(9, ok, f"Frobenius error vs optimum {worst_err:.1e}, orthogonality {worst_orth:.1e}, "
                     f"singular values vs oracle {worst_sv:.1e} (all <= 1e-8)")
    assert ok


# -- 10. sparsity / accuracy trend ------------------------------------------------------------

def _train_ter(train_ds, test_ds, seed, rank, mode, lam):
    spec = NetworkSpec.with_predictors((784, 100, 10), rank if mode != "none" else 0)
    params = init_params(spec, seed)
    hyper = HyperParams(learning_rate=0.1, l1_lambda=lam, epochs=30, seed=seed, predictor_mode=mode)
    last = train(params, train_ds, hyper, test_ds).epochs[-1]
    return last.ter, last.sparsity[0]


def test_criterion_10_sparsity_accuracy_trend(criterion, mnist5k):
    t0 = time.time()
    train_ds, test_ds = mnist5k.split_at(4000, seed=0)
    passes, rows = 0, []
    for seed in (0, 1, 2):
        base, _ = _train_ter(train_ds, test_ds, seed, 0, "none", 0.0)
        ter8, rho8 = _train_ter(train_ds, test_ds, seed, 8, "end_to_end", 0.001)
        e2e = [_train_ter(train_ds, test_ds, seed, r, "end_to_end", 0.001)[0] for r in (2, 4)]
        svd_ = [_train_ter(train_ds, test_ds, seed, r, "svd_static", 0.0)[0] for r in (2, 4)]
        high_rank = rho8 >= 0.4 and ter8 <= base + 1.5
        low_rank = np.mean(e2e) <= np.mean(svd_)
        passes += high_rank and low_rank
        rows.append(f"seed {seed}: base {base:.1f}, r8 {ter8:.1f}/rho {rho8:.2f}, "
                    f"r2/r4 e2e {e2e[0]:.1f}/{e2e[1]:.1f} vs svd {svd_[0]:.1f}/{svd_[1]:.1f} "
                    f"-> {'pass' if high_rank and low_rank else 'fail'}")
    elapsed = time.time() - t0
    ok = passes >= 2 and elapsed < 600
    criterion(10, ok, f"{passes}/3 seeds pass, {elapsed:.0f}s; " + "; ".join(rows))
    assert ok
