"""Smoke test for the compiled extension.

Build and expose the module first, e.g.

    cargo build -p axial-style-py
    cp target/debug/libaxial_style_py.so python/axial_style_py.so
    python3 python/smoke_test.py
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import axial_style_py as ax  # noqa: E402


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok: {what}")


def main():
    msa, _ = ax.msa_cost(32, 32)
    amsa, _ = ax.amsa_cost(32, 32)
    check(msa == 16 * amsa, "score ratio at 32x32 is 16")

    rows = ax.sweep([8, 16, 32])
    check([r[0] for r in rows] == [8, 16, 32], "sweep covers requested sides")
    check(all(b[2] == 8 * a[2] for a, b in zip(rows, rows[1:])), "axial cost grows 8x per doubling")

    t = ax.Tensor([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [2, 3])
    check(t.shape == [2, 3] and len(t) == 6, "tensor shape round trip")
    try:
        ax.Tensor([1.0], [2, 3])
        check(False, "bad shape raises")
    except ValueError:
        check(True, "bad shape raises ValueError")

    model = ax.Model(seed=3)
    content = ax.Tensor.uniform([2, 3, 16, 16], 0.0, 1.0, 1)
    style = ax.Tensor.uniform([1, 3, 16, 16], 0.0, 1.0, 2)
    out = model.stylize(content, style)
    check(out.shape == [2, 3, 16, 16], "stylize keeps frame shape")
    again = ax.Model(seed=3).stylize(content, style)
    check(out.tolist() == again.tolist(), "stylize is deterministic")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.udit")
        model.save(path)
        reloaded = ax.Model.load(path).stylize(content, style)
        check(reloaded.tolist() == out.tolist(), "checkpoint round trip")
        img = os.path.join(tmp, "x.ppm")
        frame = ax.Tensor(out.tolist()[: 3 * 16 * 16], [3, 16, 16])
        ax.write_ppm(img, frame)
        check(ax.read_ppm(img).shape == [3, 16, 16], "ppm round trip")

    for suite in ("losses", "flops", "interaction"):
        checks = ax.run_suite(suite)
        check(all(c[3] for c in checks), f"{suite} suite passes ({len(checks)} checks)")

    initial, final, ratio, frozen = ax.overfit_check(seed=0, steps=3)
    check(frozen and final > 0 and initial > 0, "short training run keeps encoder frozen")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
