"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines. Criterion 8 needs an external dataset manifest and is skipped unless
``LITEGCN_FPHA_MANIFEST`` is set (expensive: a full 2800-epoch run).
"""

import math
import os
import time

import numpy as np
import pytest

from litegcn.cli import main as cli_main
from litegcn.connectivity import (
    AdjacencyBasis,
    ConstraintMode,
    check_epsilon_orth,
    crispmax_forward,
    epsilon_orth_bound,
    basis_forward,
    max_colsum_deviation,
    stochastic_forward,
)
from litegcn.data import Trajectory, power_map_basis, synth_dataset, temporal_chunking
from litegcn.model import init_model, model_forward
from litegcn.train import PruneSpec, TrainConfig, evaluate, train


def report(criterion: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"\nACCEPTANCE {criterion}: {status}{suffix}")
    assert ok, f"{criterion}: {detail}"


# ---------------------------------------------------------------------------
# 1. Gradient exactness


def test_criterion_1_gradient_exactness():
    from litegcn.model import gradient_check

    t0 = time.time()
    gamma = 2.5
    worst = 0.0
    for mode in ConstraintMode:
        for seed in range(20):
            rng = np.random.default_rng(50_000 + seed)
            attempts = 0
            while True:
                model = init_model(n=5, s=4, c=3, num_classes=3, k=3, mode=mode,
                                   gamma_max=gamma, rng=rng)
                u = rng.normal(size=(4, 5))
                label = int(rng.integers(3))
                sample = type("S", (), {"u": u, "label": label})()
                trace = model_forward(model, sample, gamma)
                attempts += 1
                if np.min(np.abs(trace.pre_activation)) > 1e-4 or attempts > 20:
                    break
            errs = gradient_check(model, sample, gamma, step=1e-5)
            worst = max(worst, max(errs.values()))
    elapsed = time.time() - t0
    report(
        "1 gradient-exactness",
        worst <= 1e-6 and elapsed < 30.0,
        f"max rel err {worst:.2e} over 4 modes x 20 seeds, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. Sharpness bound


def test_criterion_2_sharpness_bound():
    t0 = time.time()
    bound = epsilon_orth_bound(2, 0.01, 0.01)
    in_range = 528.0 <= bound <= 530.0

    k, n, trials = 2, 6, 10_000
    rng = np.random.default_rng(123)
    worst = 0.0
    ok_all = True
    for gamma in (bound, 530.0):
        ahat = rng.uniform(0.0, 1.0, size=(trials, k, n, n))
        winners = ahat.argmax(axis=1)
        t_idx = np.arange(trials)[:, None, None]
        i_idx = np.arange(n)[None, :, None]
        j_idx = np.arange(n)[None, None, :]
        ahat[t_idx, winners, i_idx, j_idx] += 0.01
        z = gamma * ahat
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        a = e / e.sum(axis=1, keepdims=True)
        violation = float(np.max(a[:, 0] * a[:, 1]))
        worst = max(worst, violation)
        ok_all = ok_all and violation <= 0.01
    elapsed = time.time() - t0
    report(
        "2 sharpness-bound",
        in_range and ok_all and elapsed < 10.0,
        f"bound {bound:.2f} in [528, 530]; max violation {worst:.4f} over "
        f"2x{trials} margin-0.01 bases, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 3. Constraint satisfaction by construction


def test_criterion_3_constraints_by_construction():
    rng = np.random.default_rng(321)
    sums_ok = True
    for _ in range(25):
        k = int(rng.integers(1, 9))
        n = int(rng.integers(2, 33))
        gamma = float(rng.uniform(0.0, 800.0))
        ahat = rng.normal(0.0, 2.0, size=(k, n, n))
        crisp = crispmax_forward(ahat, gamma)
        sums_ok &= float(np.max(np.abs(crisp.sum(axis=0) - 1.0))) <= 1e-9
        col = stochastic_forward(ahat[0], gamma)
        sums_ok &= float(np.max(np.abs(col.sum(axis=0) - 1.0))) <= 1e-9

    # Combined mode at both bounds: relaxed orthogonality and exact column
    # sums must hold simultaneously on the same output. Inputs are drawn from
    # the combined-constraint regime: one dominant row per (matrix, column),
    # distinct across matrices, remaining entries near-tied across matrices.
    eps = 0.01
    both_ok = True
    worst_cross, worst_col = 0.0, 0.0
    for trial in range(50):
        k = int(rng.integers(2, 9))
        n = int(rng.integers(k, 33))
        ahat = rng.uniform(0.0, 1.0, size=(k, n, n)) * 1e-3
        for j in range(n):
            rows = rng.permutation(n)[:k]
            for kk in range(k):
                ahat[kk, rows[kk], j] = 2.0
        gamma_orth = epsilon_orth_bound(k, 1.0, 1e-4)
        gamma_stoch = epsilon_orth_bound(n, 0.9, eps)
        basis = AdjacencyBasis(ahat, mode=ConstraintMode.ORTH_STOCH,
                               gamma_max=gamma_orth, gamma_stoch=gamma_stoch)
        eff, _ = basis_forward(basis, gamma_orth)
        ok, cross = check_epsilon_orth(eff, eps)
        col_dev = max_colsum_deviation(eff)
        worst_cross = max(worst_cross, cross)
        worst_col = max(worst_col, col_dev)
        both_ok &= ok and col_dev <= 1e-9
    report(
        "3 constraints-by-construction",
        sums_ok and both_ok,
        f"softmax sums exact to 1e-9; combined mode: max cross product "
        f"{worst_cross:.4f} <= {eps}, max colsum dev {worst_col:.1e}",
    )


# ---------------------------------------------------------------------------
# 4. Lightweightness through training


def test_criterion_4_trained_sparsity():
    t0 = time.time()
    ds = synth_dataset(num_classes=5, n=12, per_class=20, noise=0.1, seed=0)

    cfg_orth = TrainConfig(max_epochs=500, mode=ConstraintMode.ORTH, gamma_max=8000.0,
                           seed=0, filters_c=16, delta=0.01)
    rng = np.random.default_rng(0)
    m_orth = init_model(n=12, s=12, c=16, num_classes=5, k=4, mode=ConstraintMode.ORTH,
                        gamma_max=8000.0, delta=0.01, rng=rng)
    _, r_orth = train(ds, m_orth, cfg_orth)
    orth_rate = r_orth.records[-1].pruning_rate

    cfg_os = TrainConfig(max_epochs=500, mode=ConstraintMode.ORTH_STOCH, gamma_max=15.0,
                         gamma_stoch=8000.0, seed=0, filters_c=16, delta=0.01,
                         noise_magnitude=1e-4, lr_init=3e-3, batch_size=10)
    rng = np.random.default_rng(0)
    m_os = init_model(n=12, s=12, c=16, num_classes=5, k=4, mode=ConstraintMode.ORTH_STOCH,
                      gamma_max=15.0, gamma_stoch=8000.0, delta=0.01, rng=rng)
    _, r_os = train(ds, m_os, cfg_os)
    os_rate = r_os.records[-1].pruning_rate

    elapsed = time.time() - t0
    orth_target = math.floor((1 - 1 / 4) * 100)   # 75
    os_target = math.floor((1 - 1 / 12) * 100)    # 91
    report(
        "4 trained-sparsity",
        orth_rate >= orth_target and os_rate >= os_target and elapsed < 300.0,
        f"orth {orth_rate:.2f}% >= {orth_target}%, "
        f"orth+stc {os_rate:.2f}% >= {os_target}% at threshold 1e-2, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 5. Regularization ordering


def test_criterion_5_constrained_beats_magnitude_pruning():
    classes, epochs = 10, 150
    ds = synth_dataset(num_classes=classes, n=12, per_class=6, noise=1.0, seed=100)
    wins = 0
    details = []
    for seed in range(5):
        cfg_os = TrainConfig(max_epochs=epochs, mode=ConstraintMode.ORTH_STOCH,
                             gamma_max=15.0, gamma_stoch=8000.0, seed=seed, filters_c=16,
                             delta=0.01, noise_magnitude=1e-4, lr_init=3e-3, batch_size=10)
        rng = np.random.default_rng(seed)
        m_os = init_model(n=12, s=12, c=16, num_classes=classes, k=4,
                          mode=ConstraintMode.ORTH_STOCH, gamma_max=15.0,
                          gamma_stoch=8000.0, delta=0.01, rng=rng)
        _, r_os = train(ds, m_os, cfg_os)
        rate = r_os.records[-1].pruning_rate

        # magnitude pruning at the same pruning rate, matched total budget
        ft = epochs // 10
        cfg_mp = TrainConfig(max_epochs=epochs - ft, mode=ConstraintMode.NONE,
                             gamma_max=15.0, seed=seed, filters_c=16, lr_init=3e-3,
                             batch_size=10, prune=PruneSpec(rate=rate, fine_tune_epochs=ft))
        rng = np.random.default_rng(seed)
        m_mp = init_model(n=12, s=12, c=16, num_classes=classes, k=4,
                          mode=ConstraintMode.NONE, gamma_max=15.0, rng=rng)
        _, r_mp = train(ds, m_mp, cfg_mp)
        win = r_os.mean_class_accuracy >= r_mp.mean_class_accuracy
        wins += int(win)
        details.append(
            f"seed {seed}: {r_os.mean_class_accuracy:.3f} vs {r_mp.mean_class_accuracy:.3f}"
        )
    report(
        "5 regularization-ordering",
        wins >= 3,
        f"constrained >= magnitude-pruned in {wins}/5 seeds [{'; '.join(details)}]",
    )


# ---------------------------------------------------------------------------
# 6. Baseline oracles


def test_criterion_6_baseline_oracles():
    rng = np.random.default_rng(777)

    # power maps vs brute-force repeated products
    power_ok = True
    for _ in range(20):
        n = int(rng.integers(2, 8))
        k = int(rng.integers(1, 6))
        a = rng.normal(size=(n, n))
        basis = power_map_basis(a, k)
        brute = np.eye(n)
        for step in range(k):
            brute = brute @ a
            power_ok &= float(np.max(np.abs(basis[step] - brute))) <= 1e-10

    # temporal chunking vs brute-force per-chunk averaging
    chunk_ok = True
    for _ in range(100):
        t_count = int(rng.integers(1, 40))
        m = int(rng.integers(1, 9))
        times = np.sort(rng.uniform(0.0, 20.0, size=t_count))
        pts = rng.normal(size=(t_count, 3))
        out = temporal_chunking(Trajectory(points=pts, times=times), m)
        t0v, t1v = times.min(), times.max()
        duration = t1v - t0v
        buckets = [[] for _ in range(m)]
        for point, stamp in zip(pts, times):
            idx = min(int((stamp - t0v) / duration * m), m - 1) if duration > 0 else 0
            buckets[idx].append(point)
        prev = pts.mean(axis=0)
        expected = []
        for bucket in buckets:
            if bucket:
                prev = np.mean(bucket, axis=0)
            expected.append(prev)
        chunk_ok &= bool(np.allclose(out, np.concatenate(expected), atol=1e-12))

    # evaluate vs hand-counted accuracy on a constructed 3-sample case
    from litegcn.data import Dataset, GraphSample, chain_skeleton
    from litegcn import backend

    n, s = 4, 6
    samples = [
        GraphSample(u=rng.normal(size=(s, n)), label=0, sequence_id="a"),
        GraphSample(u=rng.normal(size=(s, n)), label=1, sequence_id="b1"),
        GraphSample(u=rng.normal(size=(s, n)), label=1, sequence_id="b2"),
    ]
    ds = Dataset(samples=samples, graph=chain_skeleton(n), num_classes=2,
                 train_idx=[], test_idx=[0, 1, 2])
    model = init_model(n=n, s=s, c=4, num_classes=2, k=2, rng=np.random.default_rng(0))
    eff, _ = basis_forward(model.basis, model.basis.gamma_max)
    u = np.stack([x.u for x in samples])
    logits = backend.batch_logits(np.ascontiguousarray(eff.a), u, model.filters,
                                  model.head_w, model.head_b, True)
    pred = logits.argmax(axis=1)
    # relabel: class A = prediction of sample 0 (correct); class B gets one
    # correct and one wrong sample
    a_label = int(pred[0])
    b_label = 1 - a_label
    samples[0].label = a_label
    samples[1].label = int(pred[1]) if int(pred[1]) == b_label else b_label
    samples[2].label = b_label if int(pred[2]) != b_label else a_label
    acc, per_class, confusion = evaluate(model, ds, "test")
    labels = [x.label for x in samples]
    expected_per_class = []
    for cls in range(2):
        idxs = [i for i, lab in enumerate(labels) if lab == cls]
        expected_per_class.append(
            sum(1 for i in idxs if int(pred[i]) == cls) / len(idxs) if idxs else None
        )
    hand = [v for v in expected_per_class if v is not None]
    eval_ok = acc == pytest.approx(float(np.mean(hand)))
    for cls, expected in enumerate(expected_per_class):
        if expected is not None:
            eval_ok = eval_ok and per_class[cls] == pytest.approx(expected)

    report(
        "6 baseline-oracles",
        power_ok and chunk_ok and bool(eval_ok),
        "power maps 1e-10; chunking on 100 trajectories; hand-counted accuracy",
    )


# ---------------------------------------------------------------------------
# 7. CLI determinism


def test_criterion_7_cli_determinism(tmp_path, capsys):
    args = [
        "train", "--synthetic", "--classes", "3", "--nodes", "6", "--per-class", "4",
        "--epochs", "8", "--k", "2", "--filters", "4", "--mode", "orth+stc",
        "--gamma", "40", "--seed", "11",
    ]
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    code1 = cli_main(args + ["--out", str(out1)])
    code2 = cli_main(args + ["--out", str(out2)])
    capsys.readouterr()
    same_summary = (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()
    same_metrics = (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
    report(
        "7 cli-determinism",
        code1 == 0 and code2 == 0 and same_summary and same_metrics,
        "summary.json and metrics.csv byte-identical across two seeded runs",
    )


# ---------------------------------------------------------------------------
# 8. Optional FPHA integration (expensive; excluded from CI)


@pytest.mark.skipif(
    "LITEGCN_FPHA_MANIFEST" not in os.environ,
    reason="external FPHA manifest not supplied (set LITEGCN_FPHA_MANIFEST)",
)
def test_criterion_8_fpha_full_run():
    from litegcn.data import chain_skeleton, load_split

    manifest = os.environ["LITEGCN_FPHA_MANIFEST"]
    n = int(os.environ.get("LITEGCN_FPHA_JOINTS", "21"))
    ds = load_split(manifest, chain_skeleton(n), m=4)
    cfg = TrainConfig(max_epochs=2800, batch_size=600, mode=ConstraintMode.ORTH_STOCH,
                      gamma_max=530.0, seed=0, filters_c=16)
    rng = np.random.default_rng(0)
    model = init_model(n=n, s=12, c=16, num_classes=ds.num_classes, k=8,
                       mode=ConstraintMode.ORTH_STOCH, gamma_max=530.0, rng=rng)
    _, metrics = train(ds, model, cfg)
    acc = 100.0 * metrics.mean_class_accuracy
    report("8 fpha-integration", abs(acc - 86.78) <= 2.0, f"mean class accuracy {acc:.2f}%")
