"""End-to-end acceptance gate.

One test per criterion, each printing a single PASS/FAIL line.  The
training-based checks (overfit, generalization, ablation directions)
dominate the runtime; expect roughly half an hour on one CPU core.
Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import time

import numpy as np
import pytest

import msagcn.tensor as T
from msagcn import layers as L
from msagcn.data import SynthParams, dataset_arrays, generate_synthetic
from msagcn.gradcheck import grad_check
from msagcn.graphs import compose_maps, coarsen_features, default_pyramid
from msagcn.model import (MsaGcnConfig, StageConfig, build, load_checkpoint,
                          save_checkpoint)
from msagcn.training import (TrainConfig, compute_metrics, cross_entropy,
                             evaluate, lr_at, split_dataset, train)

TOL = 1e-4


def report(num, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}", flush=True)
    assert ok, f"criterion {num}: {detail}"


def scalar(y):
    return T.mean(y, axes=tuple(range(y.ndim)))


# -- criterion 1: gradient suite --------------------------------------------

def test_criterion_1_gradient_suite():
    start = time.time()
    pyr = default_pyramid(16, num_scales=2)
    g16 = pyr.scales[0]

    def mk_gcn(rng, s):
        m = L.GcnLayer(3, 4, g16, np.random.default_rng(s))
        x = T.Tensor(rng.normal(size=(2, 3, 6, 16)), requires_grad=True)
        return (lambda: scalar(m.forward(x))), [x] + m.trainable_parameters()

    def mk_astcn(rng, s):
        m = L.AsTcn(4, 5, 9, 1, np.random.default_rng(s))
        x = T.Tensor(rng.normal(size=(2, 4, 12, 5)), requires_grad=True)
        return (lambda: scalar(m.forward(x))), [x] + m.trainable_parameters()

    def mk_asst(rng, s):
        m = L.AsstGcnBlock(3, 4, g16, 2, (5, 9), np.random.default_rng(s))
        x = T.Tensor(rng.normal(size=(2, 3, 12, 16)), requires_grad=True)
        return (lambda: scalar(m.forward(x, training=True))), \
            [x] + m.trainable_parameters()

    def mk_csfm(rng, s):
        m = L.CsfmBlock(4, np.random.default_rng(s))
        xa = T.Tensor(rng.normal(size=(2, 4, 6, 16)), requires_grad=True)
        xb = T.Tensor(rng.normal(size=(2, 4, 6, 10)), requires_grad=True)
        return (lambda: scalar(m.forward(xa, xb))), \
            [xa, xb] + m.trainable_parameters()

    def mk_fusion(rng, s):
        m = L.ScaleAttentionFusion(4, 3, np.random.default_rng(s))
        xs = [T.Tensor(rng.normal(size=(2, 4, 6, 16)), requires_grad=True)
              for _ in range(3)]
        return (lambda: scalar(m.forward(xs))), xs + m.trainable_parameters()

    def mk_head(rng, s):
        m = L.ClassifierHead(4, 4, np.random.default_rng(s))
        x = T.Tensor(rng.normal(size=(2, 4, 6, 16)), requires_grad=True)
        return (lambda: scalar(m.forward(x))), [x] + m.trainable_parameters()

    def mk_end_to_end(rng, s):
        cfg = MsaGcnConfig(scales=(0, 1), stages=(StageConfig(4, 1, 1, 1),
                                                  StageConfig(8, 1, 0, 2)))
        m = build(cfg, pyr, seed=s)
        x = T.Tensor(rng.normal(size=(2, 3, 12, 16)), requires_grad=True)
        labels = rng.integers(0, 4, size=2)
        return (lambda: cross_entropy(m.forward(x, training=True), labels)), \
            [x] + m.trainable_parameters()

    makers = [("gcn", mk_gcn), ("astcn", mk_astcn), ("asst", mk_asst),
              ("csfm", mk_csfm), ("fusion", mk_fusion), ("head", mk_head),
              ("end_to_end", mk_end_to_end)]
    worst = {}
    for name, mk in makers:
        w = 0.0
        for s in range(5):
            rng = np.random.default_rng(1000 + s)
            f, params = mk(rng, s)
            w = max(w, grad_check(f, params, samples_per_param=3, seed=s))
        worst[name] = w
    elapsed = time.time() - start

    ok = max(worst.values()) < TOL and elapsed < 120
    detail = ("max rel err "
              + ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
              + f"; {elapsed:.0f}s")
    report(1, ok, detail)


# -- criterion 2: selective-kernel identities --------------------------------

def test_criterion_2_branch_weight_identities():
    rng = np.random.default_rng(0)
    m = L.AsTcn(6, 5, 9, 1, np.random.default_rng(1))
    max_dev = 0.0
    for _ in range(100):
        x = T.Tensor(rng.normal(size=(1, 6, 14, 5)))
        _, w = m.forward(x, return_weights=True)
        max_dev = max(max_dev, np.abs(w.data.sum(axis=1) - 1.0).max())
    convex_ok = max_dev <= 1e-9

    # force both branches to compute the same function
    eq = L.AsTcn(4, 5, 9, 1, np.random.default_rng(2))
    eq.tcn2.weight.data[...] = 0.0
    eq.tcn2.weight.data[:, :, 2:7] = eq.tcn1.weight.data
    eq.tcn2.bias.data[...] = eq.tcn1.bias.data
    x = T.Tensor(rng.normal(size=(3, 4, 12, 5)))
    u1 = eq.tcn1.forward(x)
    v = eq.forward(x)
    identity_dev = np.abs(v.data - u1.data).max()
    identity_ok = identity_dev <= 1e-12

    report(2, convex_ok and identity_ok,
           f"weight sum dev {max_dev:.1e} (tol 1e-9), "
           f"equal-branch dev {identity_dev:.1e} (tol 1e-12)")


# -- criterion 3: cross-scale fusion stochasticity ---------------------------

def test_criterion_3_csfm_stochastic_and_oracle():
    rng = np.random.default_rng(3)
    m = L.CsfmBlock(5, np.random.default_rng(4))
    xa = T.Tensor(rng.normal(size=(2, 5, 4, 16)))
    xb = T.Tensor(rng.normal(size=(2, 5, 4, 10)))
    out, a = m.forward(xa, xb, return_attention=True)

    row_dev = np.abs(a.data.sum(axis=2) - 1.0).max()
    in_range = (a.data >= 0).all() and (a.data <= 1).all()

    B, C, Tn, Va = xa.shape
    Vb = xb.shape[3]
    oracle = xa.data.copy()
    for b in range(B):
        for t in range(Tn):
            for p in range(Va):
                msg = np.zeros(C)
                for q in range(Vb):
                    msg += a.data[b, p, q] * xb.data[b, :, t, q]
                oracle[b, :, t, p] += m.out_w.data.T @ msg + m.out_b.data
    oracle_dev = np.abs(out.data - oracle).max()

    perm = np.random.default_rng(5).permutation(Vb)
    out_p = m.forward(xa, T.Tensor(xb.data[:, :, :, perm])).data
    perm_dev = np.abs(out_p - out.data).max()

    ok = row_dev <= 1e-9 and in_range and oracle_dev <= 1e-12 \
        and perm_dev <= 1e-9
    report(3, ok, f"row-sum dev {row_dev:.1e}, entries in [0,1]: {in_range}, "
                  f"oracle dev {oracle_dev:.1e}, permutation dev {perm_dev:.1e}")


# -- criterion 4: coarsening oracle ------------------------------------------

def test_criterion_4_coarsening_matches_group_means():
    rng = np.random.default_rng(6)
    worst = 0.0
    checked = 0
    for v in (16, 21):
        pyr = default_pyramid(v, num_scales=4)
        maps = list(pyr.maps)
        maps.append(compose_maps(pyr.maps[0], pyr.maps[1]))       # 16/21 -> 5
        maps.append(pyr.map_from_finest(3))                       # 16/21 -> 3
        for m in maps:
            x = rng.normal(size=(2, 3, 5, m.fine_vertex_count))
            out = coarsen_features(T.Tensor(x), m).data
            for c, grp in enumerate(m.groups):
                brute = x[..., list(grp)].mean(axis=-1)
                worst = max(worst, np.abs(out[..., c] - brute).max())
            checked += 1
    report(4, worst <= 1e-12,
           f"{checked} maps over both pyramids, max dev {worst:.1e} (tol 1e-12)")


# -- criterion 5: metric oracle ----------------------------------------------

def test_criterion_5_metrics_match_counting_oracle():
    rng = np.random.default_rng(7)
    exact = True
    for _ in range(100):
        true = rng.integers(0, 4, size=rng.integers(4, 60))
        pred = rng.integers(0, 4, size=true.size)
        cm = np.zeros((4, 4), dtype=np.int64)
        for t_, p_ in zip(true, pred):
            cm[t_, p_] += 1
        rep = compute_metrics(cm)
        n = true.size
        for c in range(4):
            tp = int(np.sum((true == c) & (pred == c)))
            fp = int(np.sum((true != c) & (pred == c)))
            fn = int(np.sum((true == c) & (pred != c)))
            tn = n - tp - fp - fn
            exact &= rep.per_class_accuracy[c] == (tp + tn) / n
            exact &= rep.per_class_precision[c] == \
                (tp / (tp + fp) if tp + fp else 0.0)
            exact &= rep.per_class_recall[c] == \
                (tp / (tp + fn) if tp + fn else 0.0)
        exact &= rep.accuracy == int(np.sum(true == pred)) / n
        exact &= rep.mAP == np.mean(rep.per_class_accuracy)

    uniform = cross_entropy(T.Tensor(np.full((10, 4), 0.25)),
                            np.zeros(10, dtype=int)).item()
    ce_dev = abs(uniform - np.log(4.0))
    report(5, exact and ce_dev <= 1e-9,
           f"100 confusion matrices exact: {exact}, "
           f"uniform CE dev {ce_dev:.1e} (tol 1e-9)")


# -- criterion 6: learning-rate schedule -------------------------------------

def test_criterion_6_lr_schedule():
    cfg = TrainConfig()
    ok = True
    for e in range(400):
        want = 1e-3 if e < 200 else 1e-4 if e < 300 else \
            1e-5 if e < 350 else 1e-6
        ok &= lr_at(e, cfg) == pytest.approx(want, rel=1e-12)
    report(6, ok, "1e-3 @ 0-199, 1e-4 @ 200-299, 1e-5 @ 300-349, "
                  "1e-6 @ 350-399 reproduced exactly")


# -- criterion 7: overfit check ----------------------------------------------

def test_criterion_7_overfit_tiny_model():
    start = time.time()
    ds = generate_synthetic(16, SynthParams(seed=7))
    x, y = dataset_arrays(ds.samples)
    pyr = default_pyramid(16, num_scales=2)
    cfg = MsaGcnConfig(scales=(0, 1),
                       stages=(StageConfig(8, 1, 1, 1), StageConfig(16, 1, 0, 2)))
    model = build(cfg, pyr, seed=0)
    tc = TrainConfig(batch_size=32, epochs=160, base_lr=1e-3,
                     decay_epochs=(100, 130, 150), seed=0)
    train(model, x, y, x, y, tc)
    acc = evaluate(model, x, y).accuracy
    elapsed = time.time() - start
    report(7, acc >= 0.95 and elapsed < 300,
           f"train accuracy {acc:.3f} on 64 samples in 160 epochs, "
           f"{elapsed:.0f}s (budget 300s)")


# -- criteria 8 + 9 share the synthetic benchmark ----------------------------

def _benchmark_split():
    ds = generate_synthetic(100, SynthParams(seed=11))
    tr, va, te = split_dataset(ds.samples, seed=0)
    return (dataset_arrays(tr), dataset_arrays(va), dataset_arrays(te))


def test_criterion_8_per_class_generalization():
    start = time.time()
    (xtr, ytr), (xva, yva), (xte, yte) = _benchmark_split()
    cfg = MsaGcnConfig(scales=(0, 1, 2), stages=(
        StageConfig(8, 1, 1, 1), StageConfig(16, 1, 1, 2),
        StageConfig(32, 1, 0, 2), StageConfig(64, 1, 0, 2)))
    model = build(cfg, default_pyramid(16, num_scales=3), seed=0)
    tc = TrainConfig(batch_size=32, epochs=50, base_lr=1e-3,
                     decay_epochs=(30, 42, 47), seed=0)
    train(model, xtr, ytr, xva, yva, tc)
    rep = evaluate(model, xte, yte)
    elapsed = time.time() - start
    per_class = rep.per_class_accuracy
    ok = (per_class >= 0.80).all() and elapsed < 1200
    report(8, ok, "per-class test accuracy "
           + "/".join(f"{a:.3f}" for a in per_class)
           + f" (all >= 0.80), {elapsed:.0f}s (budget 1200s)")


def _direction_run(scales, mode, seed, data):
    (xtr, ytr), (xva, yva), (xte, yte) = data
    stages = (StageConfig(8, 1, 1 if len(scales) > 1 else 0, 1),
              StageConfig(16, 1, 0, 2))
    cfg = MsaGcnConfig(scales=scales, stages=stages, temporal_mode=mode)
    model = build(cfg, default_pyramid(16, num_scales=3), seed=seed)
    tc = TrainConfig(batch_size=32, epochs=8, decay_epochs=(), seed=seed)
    train(model, xtr, ytr, xva, yva, tc)
    return evaluate(model, xte, yte).mAP


def test_criterion_9_ablation_directions():
    data = _benchmark_split()
    seeds = (0, 1, 2)
    arms = {
        "single-scale": [(s, _direction_run((0,), "astcn", s, data))
                         for s in seeds],
        "three-scale": [(s, _direction_run((0, 1, 2), "astcn", s, data))
                        for s in seeds],
        "single-tcn": [(s, _direction_run((0, 1, 2), "single_tcn", s, data))
                       for s in seeds],
    }
    means = {k: float(np.mean([m for _, m in v])) for k, v in arms.items()}
    multiscale_ok = means["three-scale"] >= means["single-scale"]
    adaptive_ok = means["three-scale"] >= means["single-tcn"]
    report(9, multiscale_ok and adaptive_ok,
           f"mean test mAP over seeds {seeds}: "
           f"three-scale {means['three-scale']:.3f} >= "
           f"single-scale {means['single-scale']:.3f}: {multiscale_ok}; "
           f"adaptive {means['three-scale']:.3f} >= "
           f"fixed-kernel {means['single-tcn']:.3f}: {adaptive_ok}")


# -- criterion 10: determinism and round-trips -------------------------------

def test_criterion_10_determinism_and_roundtrips(tmp_path):
    ds = generate_synthetic(4, SynthParams(seed=13, frames=16))
    x, y = dataset_arrays(ds.samples)
    pyr = default_pyramid(16, num_scales=2)
    cfg = MsaGcnConfig(scales=(0, 1),
                       stages=(StageConfig(4, 1, 1, 1), StageConfig(8, 1, 0, 2)))

    logs = []
    for _ in range(2):
        model = build(cfg, pyr, seed=2)
        tc = TrainConfig(batch_size=8, epochs=4, decay_epochs=(), seed=5)
        log, _ = train(model, x, y, x, y, tc)
        logs.append([e["train_loss"] for e in log])
    deterministic = logs[0] == logs[1]       # bit-identical floats

    ckpt = tmp_path / "model.ckpt"
    save_checkpoint(model, ckpt)
    again = load_checkpoint(ckpt)
    ckpt_exact = all(
        np.array_equal(pa.data.astype(np.float32), pb.data.astype(np.float32))
        for (_, pa), (_, pb) in zip(model.state_items(), again.state_items())
    )

    from msagcn.data import load_canonical, save_canonical
    path = tmp_path / "data.jsonl"
    save_canonical(ds, path)
    loaded = load_canonical(path)
    data_exact = all(
        a.id == b.id and a.label == b.label
        and np.array_equal(a.joints, b.joints)
        for a, b in zip(ds.samples, loaded.samples)
    )

    report(10, deterministic and ckpt_exact and data_exact,
           f"loss logs bit-identical: {deterministic}, checkpoint round-trip "
           f"exact: {ckpt_exact}, dataset round-trip exact: {data_exact}")
