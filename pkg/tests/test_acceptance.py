"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines
as they complete. Criterion 5 trains nine models (3 seeds x 3 regimes,
4096 iterations each) and dominates the runtime.
"""

import functools
import json
import os
import time

import numpy as np
import pytest

import ssllab.autodiff as ad
from ssllab.autodiff import backward, tensor
from ssllab.bench import DatasetSpec, ExperimentSpec, compare_supervised, run_grid
from ssllab.data import PixelStats, generate_synthetic, load_fer_csv, make_splits
from ssllab.methods import (
    DEFAULT_POLICIES,
    FINISHERS,
    METHODS,
    PREPARERS,
    RunningClassDistribution,
    compute_method_loss,
    default_config,
    distribution_align,
    sharpen,
    vat_perturbation,
)
from ssllab.augment import mixup
from ssllab.model import EmaParams, EncoderConfig, build_encoder, ema_update
from ssllab.trainer import TrainConfig, train

from oracles import (
    fd_check_subset,
    numeric_gradient,
    params_to_float64,
    recompute_method_loss,
    rel_error,
)
from test_data import write_fixture

RAW = PixelStats(0.0, 1.0)
F64 = np.float64


def criterion(number, title):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            start = time.time()
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\nACCEPTANCE {number} [FAIL] {title} ({time.time() - start:.1f}s)")
                raise
            print(f"\nACCEPTANCE {number} [PASS] {title} ({time.time() - start:.1f}s)")

        return wrapper

    return deco


def toy_setup(seed=21, dtype=np.float64):
    cfg = EncoderConfig(1, 8, (4,), False, 3)
    params = build_encoder(cfg, seed)
    if dtype == np.float64:
        params = params_to_float64(params)
    rng = np.random.default_rng(seed)
    # move to a generic point: zero-initialized biases onto exactly-zero
    # image patches put preactivations on the relu kink, where finite
    # differences are not a valid oracle
    for t in params.tensors.values():
        t.data += rng.uniform(0.02, 0.1, t.data.shape).astype(t.data.dtype)
    teacher = EmaParams.from_student(params)
    labeled = (rng.random((3, 1, 8, 8)).astype(np.float32), rng.integers(0, 3, 3))
    unlabeled = rng.random((6, 1, 8, 8)).astype(np.float32)
    return params, teacher, labeled, unlabeled


@criterion(1, "gradient suite: ops + composite losses vs finite differences (< 1 min)")
def test_criterion_1_gradient_suite():
    start = time.time()
    rng = np.random.default_rng(99)

    def fd_ok(build_loss, tensors, step=1e-4, tol=1e-3):
        for t in tensors:
            t.grad = None
        backward(build_loss())
        for t in tensors:
            numeric = numeric_gradient(lambda: build_loss().item(), t.data, step=step)
            assert rel_error(t.grad, numeric) < tol

    # every differentiable op, >= 20 random small instances each
    for _ in range(20):
        x = tensor(rng.standard_normal((2, 3)), requires_grad=True, dtype=F64)
        w = tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=F64)
        b = tensor(rng.standard_normal(4), requires_grad=True, dtype=F64)
        proj = tensor(rng.standard_normal((2, 4)), dtype=F64)
        fd_ok(lambda: ad.tsum(ad.mul(ad.dense(x, w, b), proj)), [x, w, b])

        xc = tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True, dtype=F64)
        k = tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True, dtype=F64)
        pc = tensor(rng.standard_normal((1, 3, 5, 5)), dtype=F64)
        fd_ok(lambda: ad.tsum(ad.mul(ad.conv2d(xc, k, 1, 1), pc)), [xc, k])

        rdata = rng.standard_normal((3, 4))
        rdata[np.abs(rdata) < 0.05] = 0.1
        xr = tensor(rdata, requires_grad=True, dtype=F64)
        pr = tensor(rng.standard_normal((3, 4)), dtype=F64)
        fd_ok(lambda: ad.tsum(ad.mul(ad.relu(xr), pr)), [xr])

        z = tensor(rng.standard_normal((2, 4)), requires_grad=True, dtype=F64)
        ps = tensor(rng.standard_normal((2, 4)), dtype=F64)
        fd_ok(lambda: ad.tsum(ad.mul(ad.softmax(z), ps)), [z])

        zc = tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=F64)
        target = np.eye(4)[rng.integers(0, 4, 3)]
        fd_ok(lambda: ad.cross_entropy(zc, target), [zc])

        pd = rng.random((2, 4)) + 0.05
        pd /= pd.sum(axis=1, keepdims=True)
        qd = rng.random((2, 4)) + 0.05
        qd /= qd.sum(axis=1, keepdims=True)
        q = tensor(qd, requires_grad=True, dtype=F64)
        fd_ok(lambda: ad.kl_divergence(tensor(pd, dtype=F64), q), [q])

        pl = tensor(rng.random((2, 3)), requires_grad=True, dtype=F64)
        ql = tensor(rng.random((2, 3)), requires_grad=True, dtype=F64)
        fd_ok(lambda: ad.l2_prob_distance(pl, ql), [pl, ql])

    # every composite method loss, 20 instances each, artifacts frozen
    for method in METHODS:
        for trial in range(20):
            params, teacher, labeled, unlabeled = toy_setup(seed=300 + 13 * trial)
            cfg = default_config(method, p_cutoff=0.2)
            running = RunningClassDistribution.uniform(3)
            art = PREPARERS[method](params, teacher, labeled, unlabeled, cfg, trial, RAW, DEFAULT_POLICIES, running)
            params.zero_grads()
            backward(FINISHERS[method](params, art, cfg).total_tensor)
            grads = {n: params[n].grad for n in params.names()}
            err, excluded, total = fd_check_subset(
                lambda: FINISHERS[method](params, art, cfg).total, grads, params,
                np.random.default_rng(trial), per_tensor=2)
            assert err < 1e-3, (method, trial, err)
            assert excluded <= total // 4

    elapsed = time.time() - start
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s (budget 60s)"


@criterion(2, "oracle equivalence: composite losses match step-by-step recomputation to 1e-5")
def test_criterion_2_oracle_equivalence():
    params, teacher, labeled, unlabeled = toy_setup(seed=77, dtype=np.float32)
    running = RunningClassDistribution.from_labels([0, 1, 2, 2], 3)
    running.update(np.array([0.5, 0.3, 0.2]))
    for method in METHODS:
        cfg = default_config(method, p_cutoff=0.3)
        bd = compute_method_loss(params, teacher, labeled, unlabeled, cfg,
                                 seed=31, stats=RAW, policies=DEFAULT_POLICIES, running=running)
        exp_sup, exp_unsup, exp_total = recompute_method_loss(
            method, params, teacher, labeled, unlabeled, cfg, 31, RAW, DEFAULT_POLICIES, running=running)
        assert abs(bd.supervised - exp_sup) < 1e-5, method
        assert abs(bd.unsupervised - exp_unsup) < 1e-5, method
        assert abs(bd.total - exp_total) < 1e-5, method


@criterion(3, "algebraic identities: EMA/mixup endpoints, sharpen, alignment, VAT norm, lambda=0")
def test_criterion_3_algebraic_identities():
    # EMA endpoints are exact
    cfg = EncoderConfig(1, 8, (4,), False, 3)
    student = build_encoder(cfg, 0)
    other = build_encoder(cfg, 1)
    teacher = EmaParams.from_student(other)
    before = {k: v.copy() for k, v in teacher.arrays.items()}
    ema_update(teacher, student, 1.0)
    assert all(np.array_equal(teacher.arrays[k], before[k]) for k in before)
    ema_update(teacher, student, 0.0)
    assert all(np.array_equal(teacher.arrays[k], student[k].data) for k in before)

    # mixup endpoints are exact
    rng = np.random.default_rng(5)
    x_l, x_u = rng.random((1, 8, 8)).astype(np.float32), rng.random((1, 8, 8)).astype(np.float32)
    y_l, y_u = np.array([1.0, 0.0], np.float32), np.array([0.0, 1.0], np.float32)
    for alpha in (1.0, 0.0):  # 0 flips to 1 via max(alpha, 1-alpha)
        mx, my = mixup(x_l, y_l, x_u, y_u, 0.75, 0, alpha=alpha)
        assert np.array_equal(mx, x_l) and np.array_equal(my, y_l)

    # sharpen: T=1 identity, argmax preserved on 1000 random distributions
    r = np.random.default_rng(0)
    for _ in range(1000):
        p = r.random(r.integers(2, 9)) + 1e-6
        p /= p.sum()
        assert np.array_equal(sharpen(p, 1.0), p)
        assert np.argmax(sharpen(p, float(r.uniform(0.05, 3.0)))) == np.argmax(p)

    # distribution alignment identity when running average equals the prior
    run = RunningClassDistribution.uniform(5)
    q = r.random((4, 5)) + 0.01
    q /= q.sum(axis=1, keepdims=True)
    assert np.allclose(distribution_align(q, run), q, atol=1e-7)

    # VAT perturbation norm equals epsilon per example
    params, _, _, _ = toy_setup(dtype=np.float32)
    x = np.random.default_rng(8).standard_normal((5, 1, 8, 8)).astype(np.float32)
    for eps in (0.5, 2.0, 6.0):
        rr = vat_perturbation(params, x, eps, 1e-6, rng_seed=4)
        norms = np.sqrt((rr.reshape(5, -1) ** 2).sum(axis=1))
        assert np.allclose(norms, eps, atol=1e-5)

    # lambda = 0 reduces every method's step gradients to supervised-only, bitwise
    params, teacher, labeled, unlabeled = toy_setup(seed=3, dtype=np.float32)
    running = RunningClassDistribution.uniform(3)

    def step_grads(cfg):
        params.zero_grads()
        bd = compute_method_loss(params, teacher, labeled, unlabeled, cfg,
                                 seed=12, stats=RAW, policies=DEFAULT_POLICIES, running=running)
        backward(bd.total_tensor)
        return {n: params[n].grad.copy() for n in params.names()}

    ref = step_grads(default_config("supervised-only"))
    for method in METHODS:
        got = step_grads(default_config(method, lambda_u=0.0))
        for n in ref:
            assert np.array_equal(got[n], ref[n]), (method, n)


@criterion(4, "protocol fidelity: batch ratio, lr(0), cutoff masking, split sizes")
def test_criterion_4_protocol_fidelity():
    # default batch protocol: B labeled and 7B unlabeled per iteration
    defaults = TrainConfig()
    assert defaults.labeled_batch * defaults.unlabeled_ratio == 7 * defaults.labeled_batch
    ds = generate_synthetic(80, 4, 16, seed=1)
    splits = make_splits(ds, 10, validation_fraction=0.1, seed=0)
    tc = TrainConfig(total_iterations=3, seed=0, eval_every=100)  # B/mu left at defaults
    res = train(tc, default_config("fixmatch"), splits,
                encoder_cfg=EncoderConfig(1, 16, (4,), False, 4))
    assert res.labeled_seen == 3 * tc.labeled_batch
    assert res.unlabeled_seen == 3 * 7 * tc.labeled_batch

    # lr(0) is the protocol initial learning rate
    from ssllab.trainer import cosine_lr

    assert cosine_lr(0, defaults.total_iterations, defaults.lr0) == pytest.approx(0.03)
    assert res.history.records[0].lr == pytest.approx(0.03)

    # the 0.95 cutoff masks exactly the rows an independent recount masks
    params, teacher, labeled, unlabeled = toy_setup(seed=10, dtype=np.float32)
    cfg = default_config("fixmatch")
    assert cfg.p_cutoff == 0.95
    art = PREPARERS["fixmatch"](params, teacher, labeled, unlabeled, cfg, 9, RAW, DEFAULT_POLICIES, None)
    bd = compute_method_loss(params, teacher, labeled, unlabeled, cfg,
                             seed=9, stats=RAW, policies=DEFAULT_POLICIES)
    from ssllab.model import forward
    from ssllab.augment import derive_seeds
    from ssllab.methods import _branch_seed, _U1

    seeds = derive_seeds(_branch_seed(9, _U1), len(unlabeled))
    weak = np.stack([DEFAULT_POLICIES.weak.apply(im, s) for im, s in zip(unlabeled, seeds)])
    with ad.no_grad():
        z = forward(params, weak).data.astype(np.float64)
    probs = np.exp(z - z.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    recount = probs.max(axis=1) >= 0.95
    assert np.array_equal(art["u_mask"].astype(bool), recount)
    assert bd.mask_rate == pytest.approx(float(recount.mean()))

    # the paper's label budgets for 7 classes
    ds7 = generate_synthetic(300, 7, 16, seed=2)
    for n, expected in [(10, 70), (25, 175), (100, 700), (250, 1750)]:
        assert len(make_splits(ds7, n, validation_fraction=0.1, seed=0).labeled) == expected


@criterion(5, "directional learning: FixMatch >= supervised+5pts; full supervision beats both (< 15 min)")
def test_criterion_5_directional_learning():
    start = time.time()
    ds = generate_synthetic(612, 4, 16, seed=0, noise=0.25)
    encoder = EncoderConfig(1, 16, (8, 16), False, 4)
    acc = {"sup10": [], "fix10": [], "supall": []}
    for seed in (0, 1, 2):
        for tag, method, n in (("sup10", "supervised-only", 10),
                               ("fix10", "fixmatch", 10),
                               ("supall", "supervised-only", None)):
            splits = make_splits(ds, n, validation_fraction=1 / 6, seed=seed)
            if n == 10:
                assert len(splits.unlabeled) == 2000
                assert len(splits.labeled) == 40
            tc = TrainConfig(total_iterations=4096, labeled_batch=12, unlabeled_ratio=7,
                             eval_every=4096, seed=seed)
            res = train(tc, default_config(method), splits, encoder_cfg=encoder)
            acc[tag].append(res.accuracy)
    sup10 = float(np.mean(acc["sup10"]))
    fix10 = float(np.mean(acc["fix10"]))
    supall = float(np.mean(acc["supall"]))
    elapsed = time.time() - start
    print(f"\n  sup10={sup10:.4f} fix10={fix10:.4f} supall={supall:.4f} ({elapsed:.0f}s)")
    assert fix10 >= sup10 + 0.05, f"FixMatch mean {fix10:.4f} not 5 points over supervised {sup10:.4f}"
    assert supall > fix10 and supall > sup10
    assert elapsed < 900.0, f"directional check took {elapsed:.0f}s (budget 900s)"


@criterion(6, "determinism: identical configs and seed give bit-identical history and parameters")
def test_criterion_6_determinism():
    ds = generate_synthetic(40, 3, 16, seed=9)
    splits = make_splits(ds, 5, validation_fraction=0.2, seed=2)
    tc = TrainConfig(total_iterations=16, labeled_batch=4, unlabeled_ratio=3, eval_every=8, seed=13)
    enc = EncoderConfig(1, 16, (4, 8), False, 3)
    runs = [train(tc, default_config("fixmatch"), splits, encoder_cfg=enc) for _ in range(2)]
    assert runs[0].history == runs[1].history
    for n in runs[0].params.names():
        assert np.array_equal(runs[0].params[n].data, runs[1].params[n].data)
        assert np.array_equal(runs[0].ema.arrays[n], runs[1].ema.arrays[n])


@criterion(7, "harness shapes: 8x4 grid = 32 cells, 3-column comparison, confusion accounting")
def test_criterion_7_harness_shapes(tmp_path):
    spec = ExperimentSpec(
        dataset=DatasetSpec(kind="synthetic", n_per_class=300, n_classes=7, image_size=16),
        methods=tuple(m for m in METHODS if m != "supervised-only"),
        n_labels=(10, 25, 100, 250),
        seeds=(0,),
        output_dir=str(tmp_path / "grid"),
        train=TrainConfig(total_iterations=2, labeled_batch=4, unlabeled_ratio=2, eval_every=8, seed=0),
        encoder_widths=(4,),
    )
    assert len(spec.methods) == 8
    table = run_grid(spec)
    assert len(table.records) == 32
    assert all(r.status == "ok" for r in table.records)

    # confusion matrices: cells sum to validation size, trace/sum = accuracy
    ds = generate_synthetic(300, 7, 16, seed=0)
    for rec in table.records[:4]:
        with open(os.path.join(rec.run_dir, "confusion.json")) as fh:
            counts = np.array(json.load(fh)["counts"])
        splits = make_splits(ds, rec.n_labels, spec.dataset.validation_fraction, seed=rec.seed)
        assert counts.sum() == len(splits.validation)
        assert np.trace(counts) / counts.sum() == pytest.approx(rec.accuracy)

    cmp_spec = ExperimentSpec(
        dataset=DatasetSpec(kind="synthetic", n_per_class=40, n_classes=3, image_size=16),
        methods=("supervised-only", "fixmatch"),
        n_labels=(4,),
        seeds=(0,),
        output_dir=str(tmp_path / "cmp"),
        train=TrainConfig(total_iterations=2, labeled_batch=4, unlabeled_ratio=2, eval_every=8, seed=0),
        encoder_widths=(4,),
    )
    comparison = compare_supervised(cmp_spec, n_labels=4)
    assert [c["column"] for c in comparison["columns"]] == [
        "supervised-all", "supervised-partial", "semi-supervised"]
    assert all(c["mean_accuracy"] is not None for c in comparison["columns"])


@criterion(8, "FER13-format loader: fixture round-trip and per-row error reporting")
def test_criterion_8_fer_loader(tmp_path):
    csv_path = tmp_path / "fer.csv"
    write_fixture(csv_path)
    result = load_fer_csv(csv_path)
    ds = result.dataset
    assert not result.row_errors
    assert len(ds) == 10
    assert np.array_equal(ds.class_histogram(), [2, 1, 1, 2, 1, 1, 2])
    from ssllab.data import denormalize_pixels

    expected_values = [0, 255, 17, 42, 100, 9, 250, 31, 77, 128]
    for i, v in enumerate(expected_values):
        assert np.all(denormalize_pixels(ds.images[i]) == v)

    short = " ".join(["1"] * 2303)
    write_fixture(csv_path, extra_lines=[f"2,{short},Training", f"9,{' '.join(['0']*2304)},Training"])
    result = load_fer_csv(csv_path)
    assert len(result.dataset) == 10  # valid rows all kept
    assert [e.row for e in result.row_errors] == [11, 12]
    assert all(e.message for e in result.row_errors)
