"""Smoke test for the usvs_py extension module.

Build the module first, either with `maturin develop` in crates/python or by
copying the cdylib from `cargo build -p usvs-py --release` next to this file
as usvs_py.so.
"""

import math
import sys

import usvs_py


def main():
    ph = usvs_py.Phantom()
    assert ph.stiffness_n_per_mm == 0.5
    x, y, z = ph.centerline_at(10.0)
    assert math.isfinite(x + y + z)

    sx, sy, _ = ph.start_pose()
    frame = usvs_py.Renderer().render(ph, sx, sy + 20.0, -12.0, seed=1)
    assert (frame.rows, frame.cols) == (277, 512)
    assert len(frame.pixels()) == 277 * 512
    assert len(frame.encode()) == 141_846
    truth = frame.truth()
    assert truth["vessel_visible"] and truth["lumen_fully_inside"]

    oracle = usvs_py.Detector.oracle()
    det = oracle.detect(frame)
    assert det["vessel_present"]
    assert abs(det["center_mm_offset"] - truth["offset_mm"]) < 1e-9

    assert usvs_py.x_correction(1.0) == 0.0
    assert usvs_py.x_correction(5.0) < 0.0

    scan = usvs_py.run_scan(ph, oracle, seed=0)
    assert scan.stop_reason == "length_reached", scan.stop_reason
    assert len(scan) == 70
    m = scan.metrics()
    assert m["pct_full_lumen_visible"] == 100.0
    print(
        f"scan: {scan.distance_scanned_mm:.0f} mm, MAE {m['mae_mm']:.2f} mm, "
        f"max {m['max_mm']:.2f} mm, {m['pct_full_lumen_visible']:.0f} % full lumen"
    )

    untrained = usvs_py.Detector.untrained(seed=3)
    p = untrained.detect(frame)["presence_prob"]
    assert 0.0 <= p <= 1.0
    print("smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
