"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criterion 8 trains the full desk-scale pipeline (about half an hour on one
CPU core); it is marked ``slow`` but runs by default.
"""

import json
import math
import time

import numpy as np
import pytest

from arpmnet import tensor as T
from arpmnet.blocks import DNetConfig, SNetConfig, init_params, mrf_block, multiscale_pool
from arpmnet.blocks import NetParams, _Layout
from arpmnet.checks import TOLERANCE, run_scope
from arpmnet.cli import EXIT_OK, main
from arpmnet.losses import adaptive_mce, adaptive_weights, bce, disc_loss, mce, seg_loss, weight_law
from arpmnet.metrics import (
    ahd,
    ahd_bruteforce,
    ashd,
    ashd_bruteforce,
    directed_hd,
    dsc,
    extract_surface,
    mask_points,
    vd,
)
from arpmnet.tensor import Tensor


@pytest.fixture
def verdict(capsys):
    def emit(number: int, title: str, passed: bool, detail: str = ""):
        with capsys.disabled():
            print(f"\ncriterion {number} [{'PASS' if passed else 'FAIL'}] {title}{': ' + detail if detail else ''}")
        assert passed, f"criterion {number} failed: {detail}"

    return emit


def test_criterion_1_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    seeds = range(5)
    with T.precision("float64"):
        results = run_scope("op", seeds) + run_scope("net", seeds)
    worst = max(results, key=lambda r: r.error)
    elapsed = time.perf_counter() - t0
    ok = worst.error < TOLERANCE and elapsed < 300
    verdict(1, "gradient fidelity", ok, f"{len(results)} checks over 5 seeds, max rel err {worst.error:.2e} ({worst.name}), {elapsed:.0f}s")


def test_criterion_2_multiscale_pool_shapes(verdict):
    rng = np.random.default_rng(0)
    failures = []
    for c in (4, 16, 32):
        lay = _Layout()
        lay.multiscale("pool", c)
        tensors = {}
        for k, (shape, kind) in lay.entries.items():
            data = np.ones(shape) if kind == "running_var" else rng.normal(size=shape) * 0.1
            tensors[k] = Tensor(data, requires_grad=not kind.startswith("running"))
        params = NetParams(init_params(SNetConfig(levels=2), 0).role, tensors)
        for h in (16, 32, 64):
            for w in (16, 32, 64):
                out = multiscale_pool(Tensor(rng.normal(size=(2, c, h, w))), params, "pool")
                if out.shape != (2, c, h // 2, w // 2):
                    failures.append(f"C={c} {h}x{w} -> {out.shape}")
    verdict(2, "multiscale_pool halves H and W, keeps C", not failures, "; ".join(failures) or "27 shape cases")


def test_criterion_3_mrf_identity_and_halving(verdict):
    cfg = SNetConfig()
    p = init_params(cfg, 0)
    # zero pairwise parameters: the class-mixing weights start at zero; zero the local filters too
    for key in ("mrf.local0.weight", "mrf.local1.weight", "mrf.global.weight"):
        p[key].data[...] = 0.0
    x = np.random.default_rng(1).normal(size=(2, cfg.num_classes, 16, 16)) * 4
    identity = mrf_block(Tensor(x), p, "mrf", cfg.mrf).data.tobytes() == x.tobytes()
    init_identity = mrf_block(Tensor(x), init_params(cfg, 0), "mrf", cfg.mrf).data.tobytes() == x.tobytes()
    halving = all(2 * math.ceil(k / 2) ** 2 * c < k * k * c for k in range(3, 26, 2) for c in (1, 3, 6))
    verdict(3, "MRF identity at init and parameter halving", identity and init_identity and halving,
            f"bitwise identity {identity and init_identity}, halving k=3..25 {halving}")


def test_criterion_4_metric_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, empties = 0.0, 0
    for i in range(500):
        h, w = rng.integers(1, 33, size=2)
        density = rng.uniform(0.0, 0.6)
        a = rng.random((h, w)) < density
        b = rng.random((h, w)) < rng.uniform(0.0, 0.6)
        if i % 25 == 0:
            a[...] = False  # force empty-set sentinel cases
        if i % 40 == 0:
            b[...] = False
        sentinel = math.hypot(h, w)
        x, y = mask_points(a), mask_points(b)
        xs, ys = extract_surface(a), extract_surface(b)
        empties += len(x) == 0 or len(y) == 0
        worst = max(worst, abs(ahd(x, y, sentinel) - ahd_bruteforce(x, y, sentinel)),
                    abs(ashd(xs, ys, sentinel) - ashd_bruteforce(xs, ys, sentinel)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and empties > 0 and elapsed < 120
    verdict(4, "ahd/ashd equal the brute-force oracle", ok, f"500 pairs ({empties} with an empty set), max diff {worst:.1e} mm, {elapsed:.1f}s")


def test_criterion_5_analytic_metrics(verdict):
    t = np.zeros((4, 4), bool)
    p = np.zeros((4, 4), bool)
    t[0, :4] = True
    p[0, 1:4] = True
    p[1, :3] = True
    pts = lambda *xy: np.array(xy, float).reshape(-1, 2)
    r = np.zeros(110, bool) | True
    g = np.zeros(110, bool)
    g[:100] = True
    values = {
        "dsc": (dsc(t, p), 0.6),
        "directed_hd": (directed_hd(pts(0, 0), pts(3, 4)), 5.0),
        "ahd": (ahd(pts(0, 0, 0, 1), pts(0, 0)), 0.5),
        "ashd": (ashd(pts(0, 0, 0, 1), pts(0, 0)), 0.25),
        "vd": (vd(r, g), 10.0),
    }
    bad = {k: v for k, (v, want) in values.items() if abs(v - want) > 1e-12}
    verdict(5, "analytic metric values", not bad, ", ".join(f"{k}={v[0]!r}" for k, v in values.items()))


def test_criterion_6_adaptive_weight_law(verdict):
    a = weight_law(1.0, 1.0)
    b = weight_law(0.5, 1 / math.e)
    d = np.linspace(0.0, 1.0, 20)
    share = np.linspace(0.02, 1.0, 20)
    grid = weight_law(d[:, None], share[None, :])
    mono = bool((np.diff(grid, axis=0) < 0).all() and (np.diff(grid, axis=1) < 0).all())
    # the batch-level weights follow the same law
    labels = np.zeros(1000, int)
    labels[:250] = 1
    consistent = abs(adaptive_weights([0.9, 0.3], labels, 2)[1] - weight_law(0.3, 0.25)) < 1e-15
    ok = abs(a - 1.0) < 1e-12 and abs(b - 2.5) < 1e-12 and mono and consistent
    verdict(6, "adaptive weight law", ok, f"w(1,1)={float(a)!r}, w(0.5,1/e)={float(b)!r}, 20x20 strictly monotone {mono}")


def test_criterion_7_loss_wiring(verdict):
    rng = np.random.default_rng(7)
    dcfg = DNetConfig(in_channels=3, channels=(4, 8, 8, 8))
    dnet = init_params(dcfg, 3)
    labels = rng.integers(0, 3, size=(2, 16, 16))
    y = Tensor(np.eye(3)[labels].transpose(0, 3, 1, 2))
    image = Tensor(rng.uniform(0, 1, size=(2, 1, 16, 16)))
    logits = Tensor(rng.normal(size=(2, 3, 16, 16)), requires_grad=True)
    prob = T.softmax_channels(logits)
    w = adaptive_weights([0.5, 0.7, 0.9], labels, 3)
    lam = 0.1
    ls, amce, _ = seg_loss(image, y, prob, dnet, dcfg, w, lam)
    fake = bce(dnet_forward_frozen(image, prob, dnet, dcfg), 0)
    identity = abs(ls.item() + lam * fake.item() - amce.item())
    T.backward(ls)
    d_from_s = all(t.grad is None or not t.grad.any() for _, t in dnet.trainable())
    logits.grad = None
    ld = disc_loss(image, y, T.softmax_channels(logits), dnet, dcfg)
    T.backward(ld)
    s_from_d = logits.grad is None or not logits.grad.any()
    d_learns = any(t.grad is not None and t.grad.any() for _, t in dnet.trainable())
    unit = adaptive_mce(prob, y, np.ones(3)).data.tobytes() == mce(prob, y).data.tobytes()
    ok = identity < 1e-9 and d_from_s and s_from_d and d_learns and unit
    verdict(7, "loss wiring", ok,
            f"identity residual {identity:.1e}, dL_S/dθd zero {d_from_s}, dL_D/dθs zero {s_from_d}, unit-weight bitwise {unit}")


def dnet_forward_frozen(image, prob, dnet, dcfg):
    from arpmnet.blocks import dnet_forward
    from arpmnet.losses import fake_product

    with T.no_grad():
        return dnet_forward(fake_product(image, prob), dnet, dcfg)


SMALL_RUN = {
    "seeds": {"root": 11},
    "phantom": {"size": 32},
    "snet": {"levels": 2, "base_channels": 16},
    "dnet": {"channels": [4, 8, 8, 8]},
    "count": 8,
    "train": {
        "val_fraction": 0.25,
        "stages": [
            {"stage": "coarse", "base_lr": 0.01, "iterations": 6, "val_interval": 3, "bn_recal_images": 4},
            {"stage": "fine", "base_lr": 0.0001, "iterations": 4, "val_interval": 3, "bn_recal_images": 4},
            {"stage": "adversarial", "base_lr": 0.0001, "iterations": 5, "lam": 0.1, "val_interval": 3, "bn_recal_images": 4},
        ],
    },
}


def test_criterion_9_determinism_and_persistence(verdict, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL_RUN))
    data = tmp_path / "data"
    assert main(["--threads", "1", "gen-data", "--config", str(cfg), "--out", str(data)]) == EXIT_OK
    logs = []
    for name in ("a", "b"):
        assert main(["--threads", "1", "train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / name)]) == EXIT_OK
        logs.append((tmp_path / name / "train_log.csv").read_bytes())
    identical = logs[0] == logs[1]
    resumed = []
    for stages, stop in (("coarse", 4), ("coarse,fine", 2), ("coarse,fine,adv", 3)):
        out = tmp_path / f"r{len(resumed)}"
        args = ["--threads", "1", "train", "--config", str(cfg), "--data", str(data), "--out", str(out)]
        assert main(args + ["--stages", stages, "--stop-after", str(stop)]) == EXIT_OK
        assert main(args + ["--resume", str(out / "ckpt_latest.arpm")]) == EXIT_OK
        resumed.append((out / "train_log.csv").read_bytes() == logs[0]
                       and (out / "ckpt_adversarial.arpm").read_bytes() == (tmp_path / "a" / "ckpt_adversarial.arpm").read_bytes())
    ok = identical and all(resumed)
    verdict(9, "determinism and checkpoint resume", ok,
            f"identical logs {identical}, resume at coarse/fine/adversarial reproduces log and weights {resumed}")


@pytest.mark.slow
def test_criterion_8_desk_run(verdict, tmp_path_factory):
    from arpmnet.experiment import run_desk

    t0 = time.perf_counter()
    result = run_desk(tmp_path_factory.mktemp("desk"))
    minutes = (time.perf_counter() - t0) / 60
    ok, notes = result.criterion()
    print(result.table())
    detail = (f"coarse+fine mean DSC {np.round(result.supervised.mean_dsc, 4).tolist()}, "
              f"after adversarial {np.round(result.adversarial.mean_dsc, 4).tolist()}, {minutes:.1f} min")
    if notes:
        detail += "; " + "; ".join(notes)
    verdict(8, "end-to-end desk run", ok and minutes < 30, detail)
