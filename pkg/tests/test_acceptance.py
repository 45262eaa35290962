"""Acceptance gate: the core guarantees the package makes, one test each.

Every test here checks a stated property at its stated tolerance and
time budget and prints a single ``[ACCEPT] <name>: PASS`` line on
success.  These are the release criteria; do not loosen them.
"""

import json
import time
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from endoclass.cli import main
from endoclass.config import default_config_text
from endoclass.dataset import ClassSet, scan_dataset
from endoclass.metrics import (auc_pairwise_oracle, classification_report,
                               confusion_matrix, roc_curve)
from endoclass.models import build_ensemble
from endoclass.preprocess import AugmentationPolicy, FrameCache, NormalizationStats
from endoclass.synth import generate_dataset
from endoclass.training import (AdamOptimizer, TrainingConfig, adam_step,
                                AdamState, fused_loss_and_grads, train_epoch)
from endoclass.tsne import TsneConfig, pairwise_affinities, tsne_embed

UNIT_STATS = NormalizationStats(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))


def announce(name: str, detail: str = ""):
    suffix = f" ({detail})" if detail else ""
    print(f"[ACCEPT] {name}: PASS{suffix}")


def random_instance(rng):
    """Labels, tie-heavy probabilities, and predictions for a small problem."""
    k = int(rng.integers(2, 11))
    n = int(rng.integers(k + 2, 201))
    # every class present at least once so no class has zero support
    labels = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
    rng.shuffle(labels)
    probs = rng.random(size=(n, k))
    probs = np.round(probs, 1)            # quantize to force score ties
    probs += 1e-9                          # keep rows strictly positive
    probs /= probs.sum(axis=1, keepdims=True)
    return labels, probs


def brute_force_report(labels, preds, k):
    """Independent recount of every figure in classification_report."""
    out = {}
    per = []
    for c in range(k):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall else 0.0)
        per.append((precision, recall, f1, tp + fn))
    out["per_class"] = per
    out["accuracy"] = float(np.mean(preds == labels))
    supported = [row for row in per if row[3] > 0]
    out["macro_precision"] = sum(r[0] for r in supported) / len(supported)
    out["macro_recall"] = sum(r[1] for r in supported) / len(supported)
    out["macro_f1"] = sum(r[2] for r in supported) / len(supported)
    return out


# --- 1: metric implementations agree with independent oracles ---------------------

def test_metric_oracle_equivalence():
    started = time.time()
    rng = np.random.default_rng(20240)
    instances = 1000
    auc_checked = 0
    for _ in range(instances):
        labels, probs = random_instance(rng)
        k = probs.shape[1]
        preds = probs.argmax(axis=1)
        cm = confusion_matrix(labels, preds, k)
        report = classification_report(cm)
        oracle = brute_force_report(labels, preds, k)
        for c, row in enumerate(oracle["per_class"]):
            got = report.per_class[c]
            assert abs(got.precision - row[0]) <= 1e-12
            assert abs(got.recall - row[1]) <= 1e-12
            assert abs(got.f1 - row[2]) <= 1e-12
            assert got.support == row[3]
        assert abs(report.accuracy - oracle["accuracy"]) <= 1e-12
        assert abs(report.macro_f1 - oracle["macro_f1"]) <= 1e-12
        assert abs(report.macro_precision - oracle["macro_precision"]) <= 1e-12
        assert abs(report.macro_recall - oracle["macro_recall"]) <= 1e-12
        # one-vs-rest AUC against the Mann-Whitney pairwise statistic
        for c in range(k):
            positive = labels == c
            if positive.all() or not positive.any():
                continue
            curve = roc_curve(probs[:, c], positive, class_index=c)
            expected = auc_pairwise_oracle(probs[:, c], positive)
            assert abs(curve.auc - expected) <= 1e-9
            auc_checked += 1
    elapsed = time.time() - started
    assert elapsed < 30.0, f"took {elapsed:.1f}s"
    announce("metric-oracle-equivalence",
             f"{instances} instances, {auc_checked} AUC curves, {elapsed:.1f}s")


# --- 2: micro-F1 is accuracy, exactly ----------------------------------------------

def test_micro_f1_equals_accuracy_identity():
    rng = np.random.default_rng(77)
    instances = 1000
    for _ in range(instances):
        labels, probs = random_instance(rng)
        report = classification_report(
            confusion_matrix(labels, probs.argmax(axis=1), probs.shape[1]))
        assert report.micro_f1 == report.accuracy  # exact, no tolerance
    announce("micro-f1-identity", f"{instances} instances, exact equality")


# --- 3: declared feature dimensions are the real ones ------------------------------

def test_shape_algebra_by_forward_pass():
    started = time.time()
    classes = ClassSet([f"c{i}" for i in range(10)])
    x = np.random.default_rng(0).normal(size=(2, 3, 32, 32))

    full = build_ensemble("full", classes, seed=0, input_size=32)
    _, feat_a = full.backbone_a.forward(x, train=False)
    _, feat_b = full.backbone_b.forward(x, train=False)
    assert full.backbone_a.cfg.feature_dim == 1024 and feat_a.shape == (2, 1024)
    assert full.backbone_b.cfg.feature_dim == 2048 and feat_b.shape == (2, 2048)
    _, _, _, fused = full.forward(x, train=False)
    assert full.feature_dim == 3072 and fused.shape == (2, 3072)

    tiny = build_ensemble("tiny", classes, seed=0, input_size=32)
    _, ta = tiny.backbone_a.forward(x, train=False)
    _, tb = tiny.backbone_b.forward(x, train=False)
    assert tiny.backbone_a.cfg.feature_dim == 16 and ta.shape == (2, 16)
    assert tiny.backbone_b.cfg.feature_dim == 32 and tb.shape == (2, 32)
    _, _, _, tf = tiny.forward(x, train=False)
    assert tiny.feature_dim == 48 and tf.shape == (2, 48)

    elapsed = time.time() - started
    assert elapsed < 120.0, f"took {elapsed:.1f}s"
    announce("shape-algebra",
             f"1024/2048/3072 and 16/32/48 forwarded, {elapsed:.1f}s")


# --- 4: analytic gradients match finite differences --------------------------------

def test_gradient_check_tiny_ensemble():
    # Central differences only estimate the gradient where the loss is
    # smooth across [theta-h, theta+h]; a candidate whose two one-sided
    # differences disagree has a relu/pool kink inside the interval and is
    # rejected as a measurement point, not counted as a failure.  A wrong
    # backward pass still fails at every smooth point.
    started = time.time()
    classes = ClassSet(["a", "b", "c"])
    model = build_ensemble("tiny", classes, seed=3, input_size=16)
    rng = np.random.default_rng(12)
    x = rng.normal(size=(4, 3, 16, 16))
    y = np.array([0, 1, 2, 1])

    def loss_at():
        _, la, lb = model.forward_train(x)
        loss, _, _ = fused_loss_and_grads(la, lb, y, model.fusion)
        return loss

    # analytic pass
    model.zero_grads()
    _, la, lb = model.forward_train(x)
    _, dza, dzb = fused_loss_and_grads(la, lb, y, model.fusion)
    model.backward(dza, dzb)
    params = model.params()
    center = loss_at()

    h = 1e-4
    checked = 0
    skipped = 0
    candidates = [(p, idx) for p in params
                  for idx in rng.choice(p.data.size,
                                        size=min(3, p.data.size),
                                        replace=False)]
    order = rng.permutation(len(candidates))
    for param, idx in (candidates[i] for i in order):
        if checked >= 24:
            break
        flat = param.data.reshape(-1)
        keep = flat[idx]
        flat[idx] = keep + h
        up = loss_at()
        flat[idx] = keep - h
        down = loss_at()
        flat[idx] = keep
        fd = (up - down) / (2 * h)
        split = abs((up - center) / h - (center - down) / h)
        if split > 1e-4 * max(abs(fd), 1e-6):
            skipped += 1
            continue
        grad = param.grad.reshape(-1)[idx]
        rel = abs(fd - grad) / max(abs(fd), abs(grad), 1e-8)
        assert rel <= 1e-3, (param.name, int(idx), rel)
        checked += 1
    assert checked >= 20, f"only {checked} smooth points among candidates"
    elapsed = time.time() - started
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    announce("gradient-check",
             f"{checked} parameters at h=1e-4, rel err <= 1e-3, "
             f"{skipped} kink points rejected, {elapsed:.1f}s")


# --- 5: the tiny ensemble can memorize a small set ----------------------------------

def test_overfit_smoke(tmp_path):
    started = time.time()
    data = tmp_path / "data"
    generate_dataset(data, per_class=6, seed=1, size=64)   # 60 samples <= 64
    manifest = scan_dataset(data)
    assert len(manifest.frames) <= 64
    model = build_ensemble("tiny", manifest.class_set, seed=0, input_size=32)
    cfg = TrainingConfig(lr=0.003, batch_size=32, epochs=200, seed=0)
    optimizer = AdamOptimizer(model.params(), cfg)
    policy = AugmentationPolicy(enabled=False)
    cache = FrameCache()
    best = 0.0
    epochs_used = 0
    for epoch in range(1, cfg.epochs + 1):
        _, acc = train_epoch(model, manifest.frames, optimizer, cfg, epoch,
                             stats=UNIT_STATS, policy=policy, input_size=32,
                             cache=cache)
        best = max(best, acc)
        epochs_used = epoch
        if best >= 0.95:
            break
    assert best >= 0.95, f"train accuracy peaked at {best:.3f}"
    elapsed = time.time() - started
    assert elapsed < 300.0, f"took {elapsed:.1f}s"
    announce("overfit-smoke",
             f"{best:.2%} train acc after {epochs_used} epochs, {elapsed:.1f}s")


# --- 6: the whole command-line pipeline runs ----------------------------------------

def run_pipeline(root, *, seed=4, epochs=8, per_class=20):
    data = root / "data"
    out = root / "out"
    assert main(["synth", "--out", str(data), "--per-class", str(per_class),
                 "--seed", "0"]) == 0
    cfg = root / "run.cfg"
    cfg.write_text(
        f"data_root = {data}\n"
        f"output_dir = {out}\n"
        f"seed = {seed}\n"
        "model.variant = tiny\n"
        f"training.epochs = {epochs}\n"
        "training.lr = 0.003\n"
        "training.batch_size = 32\n"
        "tsne.iterations = 250\n")
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["evaluate", "--ckpt", str(out / "best.ckpt"),
                 "--data", str(data), "--split", "val",
                 "--out", str(out)]) == 0
    assert main(["visualize", "--ckpt", str(out / "best.ckpt"),
                 "--data", str(data), "--split", "val",
                 "--out", str(out)]) == 0
    return data, out


def test_end_to_end_synthetic_run(tmp_path):
    started = time.time()
    data, out = run_pipeline(tmp_path)
    frame_count = sum(1 for d in data.iterdir() if d.is_dir()
                      for _ in d.glob("*.png"))
    assert frame_count == 200
    for name in ("best.ckpt", "curves.png", "curves.csv", "history.json",
                 "manifest.csv", "config_used.cfg", "report.json",
                 "confusion.png", "confusion.csv", "roc.png", "roc.json",
                 "tsne.png", "tsne.csv"):
        assert (out / name).is_file() and (out / name).stat().st_size > 0, name
    report = json.loads((out / "report.json").read_text())
    assert report["accuracy"] >= 0.8, f"val accuracy {report['accuracy']}"
    elapsed = time.time() - started
    assert elapsed < 600.0, f"took {elapsed:.1f}s"
    announce("end-to-end-synthetic",
             f"val accuracy {report['accuracy']:.2f}, "
             f"13 artifacts, {elapsed:.1f}s")


# --- 7: seeded runs are bit-reproducible --------------------------------------------

def test_seeded_runs_are_identical(tmp_path):
    first = run_pipeline(tmp_path / "one", epochs=3, per_class=8)
    second = run_pipeline(tmp_path / "two", epochs=3, per_class=8)
    curves_a = (first[1] / "curves.csv").read_bytes()
    curves_b = (second[1] / "curves.csv").read_bytes()
    assert curves_a == curves_b
    report_a = (first[1] / "report.json").read_bytes()
    report_b = (second[1] / "report.json").read_bytes()
    assert report_a == report_b
    announce("determinism",
             "two seeded runs: identical curves.csv and report.json")


# --- 8: the embedding solver actually descends --------------------------------------

def test_tsne_properties():
    started = time.time()
    rng = np.random.default_rng(5)
    a = rng.normal(0.0, 0.3, size=(40, 12))
    b = rng.normal(0.0, 0.3, size=(40, 12)) + 10.0
    feats = np.vstack([a, b])
    labels = np.array([0] * 40 + [1] * 40)

    p = pairwise_affinities(feats, perplexity=12.0)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p, p.T, atol=1e-15)
    np.testing.assert_allclose(np.diag(p), 0.0, atol=1e-15)
    np.testing.assert_allclose(p.sum(), 1.0, atol=1e-9)

    emb = tsne_embed(feats, labels, TsneConfig(perplexity=12.0, iterations=400,
                                               seed=2))
    assert emb.final_kl < emb.initial_kl

    _, assign = kmeans2(emb.coords, 2, seed=0, minit="++")
    purity = sum(np.bincount(labels[assign == c]).max()
                 for c in range(2) if (assign == c).any()) / len(labels)
    assert purity >= 0.9
    elapsed = time.time() - started
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    announce("tsne-properties",
             f"KL {emb.initial_kl:.3f} -> {emb.final_kl:.3f}, "
             f"purity {purity:.2f}, {elapsed:.1f}s")


# --- 9: optimizer first step and pinned defaults ------------------------------------

def test_adam_first_step_and_golden_defaults():
    cfg = TrainingConfig(lr=0.05, weight_decay=0.0)
    params = [np.array([1.0])]
    grads = [np.array([0.73])]
    state = AdamState.zeros_like(params)
    stepped = adam_step(params, grads, state, cfg, t=1)
    magnitude = abs(float(stepped[0][0] - 1.0))
    assert abs(magnitude - cfg.lr) <= 1e-6

    golden_path = Path(__file__).parent / "data" / "default_config.cfg"
    assert default_config_text().encode() == golden_path.read_bytes()
    text = golden_path.read_text()
    for pinned in ("training.lr = 0.0001", "training.batch_size = 32",
                   "training.epochs = 50", "training.weight_decay = 0.0001"):
        assert pinned in text, pinned
    announce("adam-and-defaults",
             f"first-step magnitude {magnitude:.7f} == lr, golden file matches")
