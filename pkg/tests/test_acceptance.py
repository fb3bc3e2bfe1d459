"""Acceptance criteria, one test per criterion.

Each test prints a ``[PASS]``/``[FAIL]`` line (repeated in the pytest
terminal summary) and then asserts. Oracles here are written independently
of the package code they check.
"""

import math
import time
from fractions import Fraction
from itertools import product

import numpy as np

from cxrscreen import metrics as M
from cxrscreen.cli import main
from cxrscreen.dataset import compute_class_weights, split_counts
from cxrscreen.experiments import population_experiment, severity_experiment
from cxrscreen.inpaint import fmm_inpaint, remove_markers
from cxrscreen.markers import otsu_threshold
from cxrscreen.synth import SynthSpec, corner_marker, generate_image
from cxrscreen.trainer import softmax, weighted_ce


def test_c01_class_weight_formula(report_line):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 8))
        counts = rng.integers(1, 5000, size=n)
        consts = rng.uniform(0.0, 3.0, size=n)
        got = compute_class_weights(counts, consts).weights
        for c in range(n):
            direct = consts[c] * int(counts.sum()) / (n * int(counts[c]))
            worst = max(worst, abs(got[c] - direct))
    ones = all(w == 1.0 for k in range(2, 6) for w in compute_class_weights([123] * k).weights)
    ok = worst <= 1e-12 and ones
    report_line("C1 class weights", ok, f"max |w - direct| = {worst:.1e}; balanced unit weights all 1: {ones}")
    assert ok


def test_c02_split_arithmetic(report_line):
    a, b = split_counts(4454, (0.7, 0.1, 0.2)), split_counts(1580, (0.7, 0.1, 0.2))
    ok = a == (3119, 445, 890) and b == (1106, 158, 316)
    report_line("C2 split arithmetic", ok, f"4454 -> {a}; 1580 -> {b}")
    assert ok


def _otsu_exhaustive(hist):
    nz = [i for i, h in enumerate(hist) if h]
    if len(nz) == 1:
        return nz[0]
    total = sum(hist)
    best, arg = None, None
    for t in range(len(hist)):
        w0 = sum(hist[: t + 1])
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            score = Fraction(0)
        else:
            m0 = Fraction(sum(i * hist[i] for i in range(t + 1)), w0)
            m1 = Fraction(sum(i * hist[i] for i in range(t + 1, len(hist))), w1)
            score = Fraction(w0 * w1, total * total) * (m0 - m1) ** 2
        if best is None or score > best:
            best, arg = score, t
    return arg


def test_c03_otsu_exhaustive(report_line):
    rng = np.random.default_rng(3)
    mismatches, degenerate = 0, 0
    for k in range(100):
        bins = int(rng.integers(2, 64))
        if k % 8 == 0:
            hist = [0] * bins
            hist[int(rng.integers(bins))] = int(rng.integers(1, 1000))
            degenerate += 1
        else:
            hist = [int(v) for v in rng.integers(0, 100, size=bins) * (rng.random(bins) < 0.6)]
            if sum(hist) == 0:
                hist[-1] = 3
        mismatches += otsu_threshold(hist) != _otsu_exhaustive(hist)
    ok = mismatches == 0
    report_line("C3 Otsu", ok, f"{mismatches}/100 mismatches vs exhaustive search ({degenerate} single-bin)")
    assert ok


def test_c04_fmm(report_line):
    const = np.full((32, 32), 0.6)
    mask = np.zeros((32, 32), bool)
    mask[10:22, 9:20] = True
    t0 = time.perf_counter()
    out_c = fmm_inpaint(np.where(mask, 0.0, const), mask)
    t_const = time.perf_counter() - t0
    err_c = float(np.max(np.abs(out_c - const)))

    ramp = np.tile(np.linspace(0.05, 0.95, 32), (32, 1))
    hole = np.zeros((32, 32), bool)
    hole[14:18, 14:18] = True
    src = np.where(hole, 0.0, ramp)
    t0 = time.perf_counter()
    out_r = fmm_inpaint(src, hole, radius=3)
    t_ramp = time.perf_counter() - t0
    err_r = float(np.max(np.abs(out_r - ramp)))
    untouched = np.array_equal(out_r[~hole], src[~hole]) and np.array_equal(out_c[~mask], const[~mask])
    ok = err_c <= 1e-6 and err_r <= 0.02 and untouched and max(t_const, t_ramp) < 1.0
    report_line("C4 FMM inpainting", ok,
                f"constant err {err_c:.1e}, ramp err {err_r:.2e}, non-mask identical {untouched}, "
                f"times {t_const:.3f}s/{t_ramp:.3f}s")
    assert ok


def test_c05_marker_removal(report_line):
    side = 128
    ious, maes = [], []
    for i in range(50):
        rng = np.random.default_rng([2024, i])
        box, text = corner_marker(side, rng)
        s = generate_image(SynthSpec(side=side, population=("adult", "paediatric")[i % 2],
                                     severity=("none", "mild", "moderate", "severe")[i % 4],
                                     marker=box, marker_text=text, seed=10_000 + i))
        out, found = remove_markers(s.image)
        ious.append(max((s.marker_box.iou(b) for b in found.boxes), default=0.0))
        sl = s.marker_box.slices()
        maes.append(float(np.mean(np.abs(out[sl] - s.clean[sl]))))
    hit = float(np.mean(np.array(ious) >= 0.5))
    ok = hit >= 0.9 and max(maes) <= 0.1
    report_line("C5 marker removal", ok,
                f"IoU>=0.5 for {hit:.0%} of 50 blocks (min IoU {min(ious):.2f}); "
                f"inpaint MAE mean {np.mean(maes):.4f}, max {max(maes):.4f}")
    assert ok


def _metric_oracle(cm):
    n = len(cm)
    out = {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    for c in range(n):
        tp = cm[c][c]
        col = sum(cm[r][c] for r in range(n))
        row = sum(cm[c])
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        out["precision"] += p / n
        out["recall"] += r / n
        out["f1"] += (2 * p * r / (p + r) if p + r else 0.0) / n
    total = sum(sum(r) for r in cm)
    out["accuracy"] = sum(cm[c][c] for c in range(n)) / total
    out["balanced_accuracy"] = out["recall"]
    return out


def test_c06_metric_oracles(report_line):
    rng = np.random.default_rng(6)
    worst, bal_bad = 0.0, 0
    for _ in range(1000):
        n = int(rng.integers(2, 6))
        balanced = rng.random() < 0.3
        if balanced:
            per = int(rng.integers(1, 30))
            cm = np.stack([rng.multinomial(per, np.ones(n) / n) for _ in range(n)])
        else:
            cm = rng.integers(0, 25, size=(n, n))
            cm[0, 0] += 1
        rep = M.metrics(cm)
        ref = _metric_oracle(cm.tolist())
        worst = max(worst, max(abs(getattr(rep, k) - v) for k, v in ref.items()))
        if balanced and rep.balanced_accuracy != rep.accuracy and abs(rep.balanced_accuracy - rep.accuracy) > 1e-12:
            bal_bad += 1
    auc_worst = 0.0
    for k in range(1000):
        n = int(rng.integers(2, 30))
        labels = rng.random(n) < 0.5
        labels[0], labels[-1] = True, False
        scores = np.round(rng.random(n), 1) if k % 2 else rng.random(n)
        pos, neg = scores[labels], scores[~labels]
        pairs = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in product(pos, neg))
        auc_worst = max(auc_worst, abs(M.roc_auc(scores, labels) - pairs / (len(pos) * len(neg))))
    ok = worst <= 1e-12 and auc_worst <= 1e-12 and bal_bad == 0
    report_line("C6 metric oracles", ok,
                f"max metric err {worst:.1e}, max AUC err {auc_worst:.1e}, balanced-case mismatches {bal_bad}")
    assert ok


def test_c07_fold_aggregation(report_line):
    accs = [0.7432, 0.6960, 0.7275, 0.7494, 0.7769]
    aucs = [0.8142, 0.7929, 0.8542, 0.7974, 0.8174]
    folds = [M.FoldReport(a, a, a, a, a, u) for a, u in zip(accs, aucs)]
    agg = M.aggregate(folds)
    da, du = abs(agg.mean["accuracy"] - 0.7386), abs(agg.mean["auc"] - 0.8152)
    ok = da <= 5e-5 and du <= 5e-5
    report_line("C7 fold aggregation", ok,
                f"accuracy mean {agg.mean['accuracy']:.5f} (|d| {da:.1e}), "
                f"AUC mean {agg.mean['auc']:.5f} (|d| {du:.1e})")
    assert ok


def test_c08_population_confound(report_line):
    res = population_experiment()
    conf = [f["accuracy"] for f in res["confounded"]["folds"]]
    deconf = res["deconfounded"]["aggregate"]["accuracy"]["mean"]
    conf_mean = res["confounded"]["aggregate"]["accuracy"]["mean"]
    ok = min(conf) >= 0.90 and res["gap"] >= 0.15
    report_line("C8 population confound", ok,
                f"confounded {conf_mean:.4f} (min seed {min(conf):.4f}), deconfounded {deconf:.4f}, "
                f"gap {res['gap']:.4f}")
    assert ok


def test_c09_severity_ordering(report_line):
    res = severity_experiment()
    tiers = ("normal_pcr_plus", "mild", "moderate", "severe")
    accs = [res[t]["aggregate"]["accuracy"]["mean"] for t in tiers]
    ok = all(a < b for a, b in zip(accs, accs[1:])) and 0.4 <= accs[0] <= 0.6
    report_line("C9 severity ordering", ok, " < ".join(f"{t} {a:.4f}" for t, a in zip(tiers, accs)))
    assert ok


def test_c10_gradient_check(report_line):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 8))
        z = rng.normal(0, 1.5, size=n)
        w = rng.uniform(0.1, 4.0, size=n)
        y = int(rng.integers(n))
        _, grad = weighted_ce(softmax(z), y, w)
        h = 1e-5
        fd = np.empty(n)
        for j in range(n):
            e = np.zeros(n)
            e[j] = h
            lp = -w[y] * math.log(softmax(z + e)[y])
            lm = -w[y] * math.log(softmax(z - e)[y])
            fd[j] = (lp - lm) / (2 * h)
        worst = max(worst, float(np.linalg.norm(grad - fd) / np.linalg.norm(fd)))
    ok = worst <= 1e-5
    report_line("C10 gradient check", ok, f"max relative error {worst:.2e} over 20 cases")
    assert ok


def _artifacts(d):
    return {p.relative_to(d).as_posix(): p.read_bytes()
            for p in sorted(d.rglob("*")) if p.is_file() and p.name != "run.json"}


def test_c11_determinism(tmp_path, report_line):
    def pipeline(root):
        s = root / "synth"
        steps = [
            ["synth", "--out", s, "--n", 12, "--side", 96, "--markers", 0.5, "--seed", 4],
            ["preprocess", "--manifest", s / "manifest.csv", "--out", root / "pre"],
            ["split", "--manifest", root / "pre" / "manifest.csv", "--out", root / "split", "--seed", 4],
            ["kfold", "--manifest", root / "pre" / "manifest.csv", "--out", root / "kfold", "--seed", 4],
            ["train", "--manifest", root / "pre" / "manifest.csv", "--split", root / "split" / "split.json",
             "--out", root / "train", "--epochs", 4, "--augment", "--seed", 4],
        ]
        for argv in steps:
            assert main([str(a) for a in argv]) == 0
        return {stage: _artifacts(root / stage) for stage in ("synth", "pre", "split", "kfold", "train")}

    a, b = pipeline(tmp_path / "run1"), pipeline(tmp_path / "run2")
    same = {stage: a[stage] == b[stage] and bool(a[stage]) for stage in a}
    ok = all(same.values())
    report_line("C11 determinism", ok,
                ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok
