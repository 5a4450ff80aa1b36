#!/usr/bin/env python3
"""End-to-end smoke test for the oadn_py extension module.

Builds nothing itself: expects `cargo build --release -p oadn-py` to have
produced target/release/liboadn_py.so. Copies that next to a temp dir as
oadn_py.so so the interpreter can import it, then exercises the dataset
generator, a short training run, scoring and checkpoint round-trip.
"""
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def import_module():
    so = ROOT / "target" / "release" / "liboadn_py.so"
    if not so.exists():
        sys.exit(f"{so} not found; run: cargo build --release -p oadn-py")
    stage = Path(tempfile.mkdtemp(prefix="oadn_py_"))
    shutil.copy(so, stage / "oadn_py.so")
    sys.path.insert(0, str(stage))
    import oadn_py

    return oadn_py


def main():
    m = import_module()

    # tensor + basic ops
    t = m.Tensor([2, 2], [1.0, 2.0, 3.0, 4.0])
    assert t.shape == [2, 2] and t.tolist() == [1.0, 2.0, 3.0, 4.0]

    x = m.Tensor([1, 3, 3], [0, 0, 0, 0, 1, 0, 0, 0, 0])
    k = m.Tensor([1, 1, 3, 3], [1, 2, 3, 4, 5, 6, 7, 8, 9])
    y = m.conv2d(x, k, stride=1, padding=1)
    assert y.shape == [1, 3, 3]
    assert y.tolist()[4] == 5.0  # center tap picks the kernel center

    p = m.softmax([0.0, 0.0, 0.0, 0.0])
    assert all(abs(v - 0.25) < 1e-12 for v in p)
    assert abs(m.cross_entropy([0.25, 0.25, 0.25, 0.25], 2) - math.log(4)) < 1e-12

    # gradient verification on a few seeds
    worst = max(r["max_rel_err"] for r in m.gradcheck(eps=1e-5, seeds=3))
    assert worst < 1e-4, f"gradcheck worst rel err {worst}"

    # tiny dataset -> short fit -> score -> save/load
    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "data"
        n_train, n_test = m.gen_data(
            str(data), seed=3, train_per_class=6, test_per_class=2
        )
        assert (n_train, n_test) == (42, 14)

        model = m.Model(threshold=0.6, regions="4x4")
        log = model.fit(str(data), epochs=2, lr=0.05, seed=0)
        assert len(log) == 3 and log[0].startswith("epoch 0")

        report = model.score(str(data), split="test", branch="fused")
        assert 0.0 <= report["total_acc"] <= 1.0
        assert len(report["confusion"]) == 7

        probs = model.predict_stored(str(data), 0, split="test")
        assert len(probs) == 7 and abs(sum(probs) - 1.0) < 1e-9

        ckpt = Path(tmp) / "model.ckpt"
        model.save(str(ckpt))
        again = m.Model.load(str(ckpt))
        assert again.predict_stored(str(data), 0, split="test") == probs

    print("smoke test passed")


if __name__ == "__main__":
    main()
