"""Smoke test for the calprio_py extension module.

Build and install first, e.g.:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/calprio_py-*.whl
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import calprio_py as cp


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    probs = [[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]
    labels = [0, 1, 1]
    report = cp.compute_ece(probs, labels, 1)
    conf = (0.9 + 0.8 + 0.6) / 3
    assert close(report["ece"], abs(2 / 3 - conf)), report
    assert close(cp.accuracy(probs, labels), 2 / 3)

    ent = cp.predictive_entropy([[0.5, 0.5], [1.0, 0.0]])
    assert close(ent[0], math.log(2)) and ent[1] == 0.0
    assert cp.select_topk([0.1, 0.9, 0.9, 0.3], 2) == [1, 2]
    assert close(cp.overlap_fraction([1, 2, 3, 4], [3, 4, 5, 6]), 0.5)
    assert cp.class_histogram([0, 1, 2], [0, 1, 1], 2) == [1, 2]
    assert cp.balance_ratio([2, 4]) == 2.0
    assert close(cp.cosine_lr(0, 10, 0.1), 0.1) and abs(cp.cosine_lr(10, 10, 0.1)) < 1e-15

    smoothed = cp.smooth_labels([1], 4, 0.2)
    assert close(smoothed[0][1], 0.85) and close(smoothed[0][0], 0.05)
    p = [[0.7, 0.2, 0.1]]
    ce = cp.cross_entropy(p, [[1.0, 0.0, 0.0]])
    assert close(ce, -math.log(0.7))
    assert close(cp.focal_loss(p, [0], 0.0), ce)

    features, ys = cp.make_synthetic(3, 30, [6], 2.0, 0)
    assert len(features) == 30 and len(features[0]) == 6 and sorted(set(ys)) == [0, 1, 2]
    model = cp.Model.mlp(6, 8, 1, 3, 0)
    out = model.predict_proba(features[:4])
    assert len(out) == 4 and all(close(sum(r), 1.0, 1e-9) for r in out)
    cnn = cp.Model.rescnn([3, 4, 4], 4, 1, 3, 0)
    assert len(cnn.predict_proba([[0.0] * 48])) == 1

    try:
        cp.smooth_labels([0], 2, 1.5)
    except ValueError:
        pass
    else:
        raise AssertionError("alpha outside [0, 1) must raise")

    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "run.json"
        cfg.write_text(json.dumps({
            "epochs": 4,
            "batch_size": 16,
            "dataset": {"kind": "synthetic", "classes": 3, "pool_size": 60,
                        "test_size": 15, "dims": [5], "separation": 2.0},
            "model": {"kind": "mlp", "width": 8, "depth": 1},
            "calibration": {"method": "mixup", "alpha": 0.3},
            "subset": {"warmup_epochs": 2, "fraction": 0.3},
        }))
        parsed = cp.parse_config(str(cfg))
        assert parsed["ece_bins"] == 15 and parsed["model"]["num_classes"] == 3
        final = cp.train(str(cfg), str(Path(tmp) / "run"))
        assert final["method"] == "mixup" and 0.0 <= final["test_ece"] <= 1.0
        bundle = cp.report(str(Path(tmp) / "run"))
        assert bundle["complete"] and not bundle["warnings"], bundle
        loaded = cp.Model.load(str(Path(tmp) / "run" / "model.ckpt"))
        assert loaded.num_classes == 3

    print(f"calprio_py {cp.__version__}: smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
