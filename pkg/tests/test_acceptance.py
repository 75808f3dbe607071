"""End-to-end acceptance checks, one test per criterion.

Each test appends a single ``criterion N: PASS|FAIL ...`` line to the
terminal summary before asserting.
"""
import time

import numpy as np
import pytest

from conftest import CRITERIA_LINES
from test_inversion import reference_tv_denoise
from liftnet import cli
from liftnet.architectures import (build_lista, build_unrolled_pd, condat_vu, forward_block, forward_sequential,
                                   ista, random_mlp)
from liftnet.config import RunConfig, bench_layer_counts
from liftnet.inverse_tasks import degrade_dataset, psnr_batch
from liftnet.inversion import (div_adjoint, grad_forward_diff, init_state, kappa, pdhg_x_block,
                               single_layer_invert, InversionProblem, EncoderLayer)
from liftnet.io import load_checkpoint, read_csv, save_checkpoint
from liftnet.linops import IdentityOp
from liftnet.objectives import Bregman, LiftedState, MacQP
from liftnet.optimizers import (BregmanTrainConfig, Constant, ConventionalTrainConfig, adam_step, bcd_solve,
                                default_batches, init_aux, init_state as opt_state, isgm_run, linearized_bcd_step,
                                train_conventional, train_lifted_bregman)
from liftnet.prox import BoxProj, Identity, Relu, Smooth, SoftShrink, bregman_penalty, fenchel_penalty_relu


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    CRITERIA_LINES.append(line)
    assert ok, line


# 1. block and sequential forward passes agree


def test_criterion_01_block_equals_sequential():
    t0 = time.perf_counter()
    worst = {np.float32: 0.0, np.float64: 0.0}
    for J in (1, 2, 4, 8, 16, 32):
        for dt in worst:
            rng = np.random.default_rng([7, J])
            net = random_mlp([12] * (J + 1), 12, SoftShrink(0.1), rng, dtype=dt, bias_scale=0.1)
            y = rng.standard_normal((16, 12)).astype(dt)
            blk, seq = forward_block(net, y), forward_sequential(net, y)
            diff = max(float(np.max(np.abs(blk.output - seq.output))), float(np.max(np.abs(blk.u - seq.u))))
            worst[dt] = max(worst[dt], diff)
    elapsed = time.perf_counter() - t0
    ok = worst[np.float32] == 0.0 and worst[np.float64] <= 1e-12 and elapsed < 5.0
    report(1, ok, f"fp32 max diff {worst[np.float32]:.3g}, fp64 max diff {worst[np.float64]:.3g}, "
                  f"{elapsed:.2f} s")


# 2. the v-gradient of the Bregman penalty is act(v) - u


def test_criterion_02_bregman_gradient_identity():
    rng = np.random.default_rng(2)
    h = 1e-6
    worst = 0.0
    for act, kinks in ((Relu(), (0.0,)), (SoftShrink(1.0), (-1.0, 1.0))):
        u = rng.uniform(-2, 2, (1000, 8))
        v = rng.uniform(-2, 2, (1000, 8))
        # a quarter of the points get coordinates exactly at a kink
        mask = rng.uniform(size=v.shape) < 0.25
        v[mask] = rng.choice(kinks, size=int(mask.sum()))
        # outside the potential's domain the penalty is +inf for every v
        u = np.where(np.isfinite(act.psi_elementwise(u)), u, act.prox(u))
        fd = np.empty_like(v)
        for i in range(8):
            e = np.zeros(8)
            e[i] = h
            fd[:, i] = (bregman_penalty(act, u, v + e) - bregman_penalty(act, u, v - e)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(act.prox(v) - u - fd))))
    report(2, worst <= 1e-5, f"max |grad - FD| {worst:.3g} (tol 1e-5)")


# 3. Fenchel and Bregman forms of the ReLU penalty coincide


def test_criterion_03_fenchel_equals_bregman_relu():
    rng = np.random.default_rng(3)
    u = np.abs(rng.standard_normal((10_000, 8))) * (rng.uniform(size=(10_000, 8)) < 0.7)
    v = 2 * rng.standard_normal((10_000, 8))
    gap = float(np.max(np.abs(fenchel_penalty_relu(u, v) - bregman_penalty(Relu(), u, v))))
    bad = u - 1e-3 * (rng.uniform(size=u.shape) < 0.2)
    dom_f = np.isfinite(fenchel_penalty_relu(bad, v))
    dom_b = np.isfinite(bregman_penalty(Relu(), bad, v))
    ok = gap <= 1e-10 and np.array_equal(dom_f, dom_b) and not dom_f.all()
    report(3, ok, f"max gap {gap:.3g} (tol 1e-10), domain indicators agree: {np.array_equal(dom_f, dom_b)}")


# 4. LISTA with ISTA weights reproduces ISTA


def test_criterion_04_lista_matches_ista():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    H, L = rng.standard_normal((6, 8)), rng.standard_normal((8, 8))
    gamma = 0.9 / np.linalg.norm(H @ L, 2) ** 2
    lam = 0.1
    y = rng.standard_normal((8, 6))
    net = build_lista(H, L, gamma, lam, 31, init_ista_exact=True)
    segs = net.aux_layout.split(forward_block(net, y).u[:, 6:])
    worst = 0.0
    for s in range(8):
        its = ista(H, L, y[s], lam, gamma, 30)
        for j, seg in enumerate(segs, start=1):
            worst = max(worst, float(np.max(np.abs(seg[s] - its[j]))))
    one = np.eye(1)
    fixed = ista(one, one, np.array([2.0]), 0.5, 0.5, 200)[-1, 0]
    elapsed = time.perf_counter() - t0
    ok = len(segs) == 30 and worst <= 1e-12 and abs(fixed - 1.5) <= 1e-8 and elapsed < 5.0
    report(4, ok, f"max |LISTA aux - ISTA| {worst:.3g} over 30 depths, fixed point {fixed!r}, {elapsed:.2f} s")


# 5. unrolled primal-dual network and the Condat-Vu iteration


def _analysis_problem():
    rng = np.random.default_rng(5)
    H = np.eye(6) + 0.3 * rng.standard_normal((6, 6))
    L = np.diff(np.eye(6), axis=0)
    y = rng.uniform(size=6)
    lam, gamma = 0.1, 0.4
    tau = 0.9 / (np.linalg.norm(H, 2) ** 2 / 2 + gamma * np.linalg.norm(L, 2) ** 2)
    return H, L, y, lam, gamma, tau


def _direct_condat(H, L, y, lam, gamma, tau, n):
    x, u = H.T @ y, np.zeros(L.shape[0])
    for _ in range(n):
        u_new = np.clip(u + gamma * L @ x, -lam, lam)
        x = np.clip(x - tau * H.T @ (H @ x) - tau * L.T @ (2 * u_new - u) + tau * H.T @ y, 0.0, 1.0)
        u = u_new
    return x


def test_criterion_05_condat_vu_unrolling():
    t0 = time.perf_counter()
    H, L, y, lam, gamma, tau = _analysis_problem()
    net = build_unrolled_pd(H, L, gamma, tau, lam, BoxProj(0, 1), 20)
    gap = float(np.max(np.abs(forward_block(net, y).output - _direct_condat(H, L, y, lam, gamma, tau, 20))))
    values = np.empty(100_000)

    def record(j, x):
        values[j - 1] = 0.5 * np.sum((H @ x - y) ** 2) + lam * np.abs(L @ x).sum()

    condat_vu(H, L, y, lam, gamma, tau, BoxProj(0, 1), 100_000, callback=record)
    excess = float(values[9_999] - values.min())
    elapsed = time.perf_counter() - t0
    ok = gap <= 1e-12 and excess <= 1e-6 and elapsed < 30.0
    report(5, ok, f"depth-20 gap {gap:.3g}, objective excess at 1e4 {excess:.3g}, {elapsed:.2f} s")


# 6. exact BCD never increases the inner objective


def test_criterion_06_bcd_monotone():
    rng = np.random.default_rng(6)
    net = random_mlp([3, 5, 4, 2], 2, Smooth("tanh"), rng, bias_scale=0.2)
    y, x = rng.standard_normal((8, 3)), rng.standard_normal((8, 2))
    state = LiftedState(net, init_aux(net, y, "gaussian", rng, 0.5))
    _, rep = bcd_solve(MacQP(1.0), state, y, x, tau=1.0, anchor=net.params, sweeps=20)
    worst = float(np.max(np.diff(rep.objectives)))
    report(6, len(rep.objectives) == 21 and worst <= 1e-12, f"largest per-sweep increase {worst:.3g} (slack 1e-12)")


# 7. Bregman training never evaluates the activation derivative


def test_criterion_07_derivative_free(monkeypatch):
    calls = []

    def poisoned(self, v):
        calls.append(1)
        raise AssertionError("activation derivative evaluated")

    monkeypatch.setattr(SoftShrink, "derivative", poisoned)
    rng = np.random.default_rng(7)
    net = random_mlp([3, 4, 2], 2, SoftShrink(0.1), rng, bias_scale=0.2)
    y, x = rng.standard_normal((8, 3)), rng.standard_normal((8, 2))
    for variant in ("plain", "nesterov", "heavyball", "adam"):
        train_lifted_bregman(net, y, x, BregmanTrainConfig(steps=10, variant=variant))
    clean = not calls
    state = LiftedState(net, init_aux(net, y, "forward"))
    with pytest.raises(AssertionError):
        linearized_bcd_step(MacQP(1.0), state, y, x, 1.0, state.params, 1e-2, 1e-2)
    report(7, clean and bool(calls), f"derivative calls during Bregman training: {0 if clean else len(calls)}, "
                                     f"MAC-QP faulted: {bool(calls)}")


# 8. desk-scale denoising


def test_criterion_08_denoising():
    t0 = time.perf_counter()
    cfg = RunConfig()
    ds = cli.load_dataset(cfg)
    train, val = ds.part("train"), ds.part("val")
    spec = cli.degradation(cfg)
    Ytr = degrade_dataset(spec, train.images, ds.shape, 2 * cfg.seed)
    Yva = degrade_dataset(spec, val.images, ds.shape, 2 * cfg.seed + 1)
    net = cli.make_network(cfg, train.images.shape[1])
    lifted = train_lifted_bregman(net, Ytr, train.images, BregmanTrainConfig(
        steps=cfg.steps, variant="adam", alpha=cfg.lr, beta=cfg.lr_aux, mu=cfg.mu, aux_init=cfg.aux_init,
        record_every=cfg.steps, seed=cfg.seed))
    conv = train_conventional(net, Ytr, train.images, ConventionalTrainConfig(
        steps=cfg.steps, lr=cfg.lr, record_every=cfg.steps, seed=cfg.seed))
    med = lambda out: float(np.median(psnr_batch(out, val.images)))
    noisy, p_lifted = med(Yva), med(forward_block(lifted.net, Yva).output)
    p_conv = med(forward_block(conv.net, Yva).output)
    obj0, obj1 = lifted.metrics[0]["objective"], lifted.metrics[-1]["objective"]
    elapsed = time.perf_counter() - t0
    drop = 1 - obj1 / obj0
    ok = drop >= 0.5 and p_lifted > noisy and p_conv < p_lifted and elapsed < 600
    report(8, ok, f"objective drop {100 * drop:.1f}%, median PSNR noisy {noisy:.2f} / lifted {p_lifted:.2f} / "
                  f"conventional {p_conv:.2f} dB, {elapsed:.0f} s")


# 9. inversion machinery


def test_criterion_09_inversion_machinery():
    rng = np.random.default_rng(9)
    x, z = rng.standard_normal((7, 5)), rng.standard_normal((7, 5, 2))
    adj = abs(float(np.sum(grad_forward_diff(x) * z) - np.sum(x * div_adjoint(z))))
    img = np.zeros((8, 8))
    img[2:6, 3:7] = 1.0
    y = (img + 0.2 * rng.standard_normal(img.shape)).ravel()
    alpha = 0.1
    prob = InversionProblem([EncoderLayer(IdentityOp(64), np.zeros(64), Identity())], y, (8, 8), alpha,
                            tau_x=1.0, pdhg_iters=500)
    norms = []
    pdhg_x_block(prob, init_state(prob), callback=lambda k, xk, zk: norms.append(np.max(np.linalg.norm(zk, axis=-1))))
    # recomputing the norm of a projected vector can round one ulp above 1
    feasible = len(norms) == 500 and max(norms) <= 1.0 + 1e-15
    xhat = single_layer_invert(np.eye(64), np.zeros(64), Identity(), y, alpha, (8, 8), tau_x=1.0,
                               pdhg_iters=20000, pdhg_tol=1e-12)
    tv_gap = float(np.max(np.abs(xhat.reshape(8, 8) - reference_tv_denoise(y.reshape(8, 8), alpha))))
    ok = adj <= 1e-10 and feasible and tv_gap <= 1e-6 and kappa(1.0) == 0.5
    report(9, ok, f"adjointness {adj:.3g}, dual feasible each step: {feasible}, TV reference gap {tv_gap:.3g}, "
                  f"kappa(1) = {kappa(1.0)}")


# 10. reconstruction error shrinks with the noise level


def test_criterion_10_noise_decay():
    t0 = time.perf_counter()
    W = np.random.default_rng(0).standard_normal((64, 32)) / np.sqrt(32)
    b = np.zeros(64)
    x_true = np.zeros((4, 8))
    x_true[1:3, 2:6] = 1.0
    x_true = x_true.ravel()
    clean = np.maximum(W @ x_true, 0.0)
    lip = np.linalg.norm(W, 2) ** 2
    medians = []
    for delta in (0.1, 0.02, 0.004):
        errs = []
        for s in range(20):
            y = clean + delta * np.random.default_rng([s]).standard_normal(64)
            x = single_layer_invert(W, b, Relu(), y, delta, (4, 8), tau_x=1.0 / lip, pdhg_iters=20000,
                                    pdhg_tol=1e-9)
            errs.append(np.linalg.norm(x - x_true))
        medians.append(float(np.median(errs)))
    elapsed = time.perf_counter() - t0
    ok = all(b <= a for a, b in zip(medians, medians[1:])) and elapsed < 300
    report(10, ok, f"median errors {', '.join(f'{m:.3f}' for m in medians)}, {elapsed:.0f} s")


# 11. optimiser transcription


def test_criterion_11_optimizer_transcription():
    s = opt_state({"w": np.array([0.0])}, 0.9, 0.999, 1e-8)
    step = float(adam_step(s, {"w": np.array([1.0])}, Constant(0.1)).x["w"][0])
    adam_err = abs(step - (-0.1 / (1 + 1e-8)))
    rng = np.random.default_rng(11)
    net = random_mlp([3, 4, 2], 2, SoftShrink(0.1), rng, bias_scale=0.2)
    y, x = rng.standard_normal((8, 3)), rng.standard_normal((8, 2))
    frozen = isgm_run(Bregman(1.0), net, y, x, default_batches(8, 4), tau=0.0, sweeps=3).net
    exact = all(np.array_equal(frozen.params[k], net.params[k]) for k in net.learnable)
    # the parameter movement vanishes linearly as tau -> 0+
    moves = []
    for tau in (1e-2, 1e-4, 1e-6):
        out = isgm_run(Bregman(1.0), net, y, x, default_batches(8, 4), tau=tau, sweeps=3).net
        moves.append(max(float(np.max(np.abs(out.params[k] - net.params[k]))) for k in net.learnable))
    shrinking = moves[1] <= 1e-1 * moves[0] and moves[2] <= 1e-1 * moves[1]
    ok = adam_err <= 1e-15 and exact and shrinking
    report(11, ok, f"adam error {adam_err:.3g}, theta frozen at tau=0: {exact}, "
                   f"movement at tau=1e-2,1e-4,1e-6: {', '.join(f'{m:.2g}' for m in moves)}")


# 12. persistence and determinism


def test_criterion_12_persistence_and_determinism(tmp_path):
    identical = True
    for dt in (np.float32, np.float64):
        net = random_mlp([6, 5, 4], 3, SoftShrink(0.2), np.random.default_rng(12), dtype=dt, bias_scale=0.1)
        save_checkpoint(tmp_path / "net.bin", net)
        y = np.random.default_rng(1).standard_normal((5, 6)).astype(dt)
        identical &= np.array_equal(forward_block(load_checkpoint(tmp_path / "net.bin"), y).output,
                                    forward_block(net, y).output)
    conf = tmp_path / "run.conf"
    conf.write_text("task = train\ndata_count = 20\ndata_val_count = 5\ndata_size = 8\nhidden = 16\n"
                    "steps = 30\nrecord_every = 10\n")
    codes = [cli.main(["train", "--config", str(conf), "--seed", "3", "--out", str(tmp_path / r)])
             for r in ("a", "b")]
    same = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    ok = identical and codes == [0, 0] and same
    report(12, ok, f"checkpoint round trip bit-identical: {identical}, metrics.csv byte-identical: {same}")


# 13. benchmark harness


def test_criterion_13_bench(tmp_path):
    cfg = RunConfig(task="bench", bench_repeat=1, bench_width=32, bench_batch=16)
    code = cli.cmd_bench(cfg, tmp_path)
    counts = bench_layer_counts(cfg)
    ok = code == 0
    detail = []
    for name in ("forward", "backward", "lifted"):
        rows = read_csv(tmp_path / f"bench_{name}.csv")
        ok &= [int(r["layers"]) for r in rows] == counts and all("speedup" in r for r in rows)
        detail.append(f"{name} speedup at {counts[-1]} layers {float(rows[-1]['speedup']):.2f}")
    report(13, ok, f"{len(counts)} layer counts {counts[0]}..{counts[-1]}, equality gate passed; "
                   + ", ".join(detail))
