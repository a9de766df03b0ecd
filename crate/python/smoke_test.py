#!/usr/bin/env python3
"""Smoke test for the moose_py extension module.

Builds nothing itself: it locates the cdylib produced by
`cargo build -p moose-py --release` (or the debug build), loads it, and
exercises the main types and operations end to end on tiny inputs.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

REPO = Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        REPO / "target" / "release" / "libmoose_py.so",
        REPO / "target" / "debug" / "libmoose_py.so",
        REPO / "target" / "release" / "libmoose_py.dylib",
        REPO / "target" / "debug" / "libmoose_py.dylib",
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("build the extension first: cargo build -p moose-py --release")
    stage = Path(tempfile.mkdtemp(prefix="moose_py_"))
    shutil.copy2(built, stage / "moose_py.so")
    sys.path.insert(0, str(stage))
    import moose_py

    return moose_py


def main():
    mp = load_module()
    checks = 0

    def ok(cond, what):
        nonlocal checks
        if not cond:
            sys.exit(f"FAIL: {what}")
        checks += 1
        print(f"ok {checks:2d}: {what}")

    # --- model build / forward -------------------------------------------
    model = mp.PyramidModel.build(
        num_classes=8,
        branch_dilations=[1, 2, 4],
        seed=3,
        encoder_channels=16,
        branch_channels=8,
        projection_channels=8,
    )
    ok(model.num_heads == 4, "model exposes K+1 heads")
    ok(model.branch_dilations == [1, 2, 4], "dilations round-trip")

    rng = np.random.default_rng(0)
    img = rng.random((3, 32, 32), dtype=np.float32)
    stack = model.forward_all(img)
    ok(stack.shape == (4, 8, 32, 32), "forward_all shape [K+1, N, H, W]")
    stack2 = model.forward_all(img)
    ok(np.array_equal(stack, stack2), "forward_all is deterministic")
    zg = model.forward_global(img)
    ok(np.array_equal(zg, stack[0]), "forward_global equals stack slice 0")

    same = mp.PyramidModel.build(
        num_classes=8,
        branch_dilations=[1, 2, 4],
        seed=3,
        encoder_channels=16,
        branch_channels=8,
        projection_channels=8,
    )
    ok(same.digest("all") == model.digest("all"), "same seed, same parameters")

    # --- scoring -----------------------------------------------------------
    probs = mp.softmax_per_head(stack)
    sums = probs.sum(axis=1)
    ok(np.allclose(sums, 1.0, atol=1e-5), "softmax rows sum to 1")

    logits = np.zeros((2, 2, 1, 1), dtype=np.float32)
    logits[0, 0, 0, 0] = 50.0  # head 0 one-hot on class 0
    logits[1, 1, 0, 0] = 50.0  # head 1 one-hot on class 1
    h = mp.score_map(logits, "h", heads="all")
    ok(abs(h[0, 0] - math.log(2)) < 1e-4, "entropy of disagreeing one-hots is ln 2")
    msp = mp.score_map(logits, "msp", heads="all")
    ok(abs(msp[0, 0] + 0.5) < 1e-4, "MSP of disagreeing one-hots is -0.5")
    mi = mp.mutual_information(logits, heads="all")
    ok(abs(mi[0, 0] - math.log(2)) < 1e-4, "MI of disagreeing one-hots is ln 2")
    var = mp.prediction_variance(logits, heads="all")
    ok(abs(var[0, 0] - 25.0) < 1e-3, "variance convention gives 25.0")

    dup = np.concatenate([stack[:1]] * 3, axis=0)
    mi0 = mp.mutual_information(dup, heads="all")
    ok(float(np.max(mi0)) < 1e-9, "duplicated heads have zero MI")

    # --- metrics -----------------------------------------------------------
    scores = np.array([0.9, 0.8, 0.3, 0.1])
    labels = np.array([True, True, False, False])
    ok(abs(mp.aupr(scores, labels) - 1.0) < 1e-12, "perfect separation AUPR = 1")
    ok(abs(mp.fpr_at_95_tpr(scores, labels)) < 1e-12, "perfect separation FPR95 = 0")
    conf = np.full(10, 0.8)
    correct = np.array([True] * 6 + [False] * 4)
    ok(abs(mp.ece(conf, correct) - 0.2) < 1e-12, "ECE single-bin gap is 0.2")
    pred = np.array([[1, 0], [1, 0]], dtype=np.uint8)
    gt = np.array([[1, 1], [0, 0]], dtype=np.uint8)
    ok(abs(mp.miou(pred, gt, 2, class_subset=[1]) - 1 / 3) < 1e-12, "2x2 IoU case = 1/3")

    # --- synthetic data ------------------------------------------------------
    image, labels_, anomaly = mp.generate_scene(0, split="test", image_size=64, seed=5)
    ok(image.shape == (3, 64, 64), "scene image shape")
    ok(anomaly.max() == 1, "test scene carries anomalies")
    ok(
        bool(np.all((labels_ == mp.IGNORE_INDEX) == (anomaly == 1))),
        "anomaly pixels are ignore-labelled",
    )
    image_b, _, _ = mp.generate_scene(0, split="test", image_size=64, seed=5)
    ok(np.array_equal(image, image_b), "scene generation is deterministic")

    fg = list(range(2, 7))
    noisy = mp.corrupt_foreground(image, labels_, fg, 1.0, 7, seed=1)
    untouched = ~np.isin(labels_, fg)
    ok(
        np.array_equal(image[:, untouched], noisy[:, untouched]),
        "corruption leaves other pixels bit-identical",
    )

    # --- end to end on a micro dataset --------------------------------------
    with tempfile.TemporaryDirectory() as tmp:
        n_classes = mp.generate_dataset(
            tmp, image_size=64, train_scenes=8, val_scenes=2, test_scenes=2, seed=9
        )
        ok(n_classes == 7, "dataset reports class count")
        micro = mp.PyramidModel.build(
            num_classes=8,
            branch_dilations=[1, 2],
            seed=1,
            encoder_channels=16,
            branch_channels=8,
            projection_channels=8,
        )
        before = micro.digest("non_probe")
        micro.train_on_dataset(tmp, epochs=1, probe_epochs=1, batch_size=4, seed=2)
        after = micro.digest("non_probe")
        ok(before != after, "base training updates the trunk")

        frozen = micro.digest("non_probe")
        report = micro.evaluate(tmp, score="h", heads="all")
        ok(micro.digest("non_probe") == frozen, "evaluation never mutates the model")
        ok(0.0 <= report["aupr"] <= 1.0, "evaluation report is well-formed")

        ckpt = str(Path(tmp) / "m.ckpt")
        micro.save(ckpt)
        again = mp.PyramidModel.load(ckpt)
        ok(again.digest("all") == micro.digest("all"), "checkpoint round-trips bitwise")

    print(f"\nsmoke test passed ({checks} checks)")


if __name__ == "__main__":
    main()
