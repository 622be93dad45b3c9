"""Smoke test for the pemf Python extension.

Build and install first:  pip install --no-build-isolation -e crates/py
"""

import math
import os
import sys
import tempfile

import pemf


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    samples = pemf.synth(count=4, size=16, seed=1)
    check(len(samples) == 4 and len(samples[0]["image"]) == 16, "synth shapes")
    check(samples == pemf.synth(count=4, size=16, seed=1), "synth is deterministic")

    m = pemf.mask_metrics([[1, 1, 0, 0]], [[1, 0, 1, 0]])
    check((m["tp"], m["fp"], m["fn"], m["tn"]) == (1, 1, 1, 1), "confusion counts")
    check(abs(m["dsc"] - 2 * m["iou"] / (1 + m["iou"])) < 1e-12, "dsc/iou identity")

    cases = pemf.gradcheck("losses", seed=3)
    check(all(c["passed"] for c in cases), f"loss gradients ({len(cases)} cases)")
    bad = [c["name"] for c in pemf.gradcheck("ops", perturb="sigmoid") if not c["passed"]]
    check(bad == ["sigmoid"], "perturbed rule is caught")

    with tempfile.TemporaryDirectory() as tmp:
        ck = os.path.join(tmp, "model.pemf")
        out = pemf.train_synthetic(
            epochs=2, count=8, size=16, depth=2, base_channels=4, pcam_paths=2, checkpoint=ck
        )
        check(len(out["history"]) == 2 and out["halted"] is None, "training ran")
        check(all(math.isfinite(h[1]) for h in out["history"]), "finite losses")

        model = pemf.Model.load(ck)
        check(model.input_size == (16, 16) and model.epoch == 2, "checkpoint metadata")
        image = [[(x * y) % 7 / 7.0 for x in range(40)] for y in range(30)]
        mask = model.predict(image)
        check(len(mask) == 30 and len(mask[0]) == 40, "mask at input resolution")
        check({v for row in mask for v in row} <= {0.0, 1.0}, "mask is binary")
        check(mask == model.predict(image), "prediction is deterministic")

        data = os.path.join(tmp, "data")
        check(pemf.write_synth(data, count=4, size=16, seed=2) == 4, "write_synth")
        report = model.evaluate(data)
        check(report["images"] == 4 and 0.0 <= report["dsc"] <= 1.0, "evaluate on a directory")

        try:
            pemf.Model.load(os.path.join(tmp, "missing.pemf"))
        except OSError:
            check(True, "missing checkpoint raises OSError")
        else:
            check(False, "missing checkpoint raises OSError")

    print("smoke test passed")


if __name__ == "__main__":
    main()
