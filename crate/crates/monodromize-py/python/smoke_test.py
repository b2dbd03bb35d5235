"""Smoke test for the Python bindings.

Build the module first:
    cargo build --release -p monodromize-py --features extension-module
then run this file with python3 from anywhere.
"""

import cmath
import importlib.util
import math
import pathlib
import sys

ROOT = pathlib.Path(__file__).resolve().parents[3]


def load():
    for name in ("libmonodromize_py.so", "libmonodromize_py.dylib", "monodromize_py.dll"):
        lib = ROOT / "target" / "release" / name
        if lib.exists():
            spec = importlib.util.spec_from_file_location("monodromize_py", lib)
            mod = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(mod)
            return mod
    sys.exit("build the extension first: cargo build --release -p monodromize-py --features extension-module")


def main():
    m = load()

    # Value at -π for h = 1.2, matching the closed form checked by the Rust suite.
    v = m.sigma(1.2, complex(-math.pi, 0.0))
    assert abs(v - complex(0.5691083691190546, -0.419661368484935)) < 1e-10, v
    # σ tends to one towards -i∞.
    assert abs(m.sigma(1.2, complex(0.4, -15.0)) - 1.0) < 1e-5

    assert m.cf_expand(2 * math.pi * 5 / 7) == [1, 2, 2]
    golden = math.pi * (math.sqrt(5) - 1)
    assert abs(m.step_map(golden) - golden) < 1e-12
    assert m.step_map(2 * math.pi / 3) is None

    r = m.harper_monodromy(1.0, 0.1, math.sqrt(2))
    assert r["shape_residual"] < 1e-4, r
    assert r["closed_form_deviation"] < 1e-4, r
    assert abs(r["lambda1"] - 1.0) < 1e-15
    assert cmath.isfinite(r["s"]) and cmath.isfinite(r["t"])
    print("python smoke test passed:", {k: r[k] for k in ("s", "t", "shape_residual")})


if __name__ == "__main__":
    main()
