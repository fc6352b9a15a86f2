"""Smoke test for the compiled `lomo` extension.

Build and run from the repository root:

    cargo build --release -p lomo-py --features extension-module
    cp target/release/liblomo.so python/lomo.so
    python3 python/smoke.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import lomo


def main():
    assert lomo.round_to_half(1.0) == 1.0
    assert math.isinf(lomo.round_to_half(65520.0))
    assert lomo.clip_by_value([1.3, 0.8], 1.0) == [1.0, 0.8]

    rows = lomo.estimate()
    assert len(rows) == 6
    lomo_row = [r for r in rows if r.optimizer == "LOMO"][0]
    assert round(lomo_row.gradients_gib, 2) == 0.24
    print(rows[0])

    cfg = lomo.RunConfig.regression(optimizer="sgd", lr=0.05, steps=30, seed=7)
    sgd = lomo.run(cfg)
    cfg.optimizer = "lomo"
    fused = lomo.run(cfg)
    assert sgd.final_digest == fused.final_digest
    assert len(fused.losses) == 30
    print("sgd and lomo digests match:", fused.final_digest[:16])

    trainer = lomo.Trainer(cfg)
    losses = [trainer.step() for _ in range(5)]
    assert all(math.isfinite(x) for x in losses)
    assert trainer.peak_bytes("gradients") == max(
        4 * len(trainer.param_values(n)) for n in trainer.param_names()
    )

    big, small = lomo.implicit_batch(cfg, 0.05)
    print("implicit batch ratio: %.3f" % (big / small))
    assert 3.0 <= big / small <= 5.0

    with tempfile.TemporaryDirectory() as d:
        path = fused.emit(d)
        with open(path) as f:
            record = json.load(f)
        assert record["schema_version"] == lomo.REPORT_SCHEMA_VERSION
        assert len(record["losses"]) == 30

    try:
        lomo.RunConfig.regression(steps=0)
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("steps=0 accepted")

    print("ok")


if __name__ == "__main__":
    main()
