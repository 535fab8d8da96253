"""Smoke test for the `ambit` extension module.

Build and install first, e.g. `pip install --no-build-isolation ./crates/python`.
"""

import math
import sys
import tempfile
from pathlib import Path

import ambit


def close(a, b, tol):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    assert close(ambit.abs_moment(2.0), 1.0, 1e-12)
    assert close(ambit.abs_moment(4.0), 3.0, 1e-12)
    assert ambit.hermite_poly(0, 0.3) == 1.0

    alpha = ambit.up_hermite_coeffs(2.0, 6)
    assert close(alpha[2], 2.0, 1e-10)
    assert all(abs(a) < 1e-10 for k, a in enumerate(alpha) if k != 2)

    cov, ratio = ambit.power_cov_probe(0.4, 2.0)
    assert close(cov, 2 * 0.4**2, 1e-8) and close(ratio, 2.0, 1e-8)

    uni = ambit.WeightSpec.uniform(0.0, 1.0, 0.0, 1.0)
    assert uni.kind == "uniform"
    assert close(ambit.compute_cn(uni, 16), 4.0 / 16**2, 1e-10)
    assert uni.admissible_kappa()[2]

    sing = ambit.WeightSpec.singular(0.75)
    upper, inclusive, empty = sing.admissible_kappa()
    assert close(upper, 2.5 / 4.5, 1e-12) and not inclusive and not empty
    assert close(sing.g(0.3, 0.1), sing.g(0.1, 0.3), 1e-14)
    assert close(ambit.compute_cn(sing.scaled(2.0), 8), 4.0 * ambit.compute_cn(sing, 8), 1e-10)

    try:
        ambit.WeightSpec.singular(1.5)
    except ValueError:
        pass
    else:
        raise AssertionError("alpha = 1.5 accepted")

    vol = ambit.Volatility.deterministic("sin", 64)
    field = ambit.simulate_lattice(uni, vol, 8, 16, 3)
    assert len(field) == 9 and all(len(row) == 9 for row in field)
    again = ambit.simulate_lattice(uni, vol, 8, 16, 3)
    assert field == again

    v = ambit.power_variation(uni, vol, 8, 1, 16, 3, 2.0, 1.0, 1.0)
    v2 = ambit.power_variation(uni, vol.scaled(2.0), 8, 1, 16, 3, 2.0, 1.0, 1.0)
    assert v > 0 and close(v2, 4.0 * v, 1e-12)

    eps, s, t = 0.1, 0.35, 0.72
    fs, ft = (s / eps) % 1.0, (t / eps) % 1.0
    expected = -eps * (fs * t + ft * s - eps * fs * ft)
    assert close(ambit.bias_term(1.0, 2.0, eps, s, t), expected, 1e-12)

    const = ambit.Volatility.constant(1.0, 16)
    assert close(ambit.clt_variance(const, 2.0, (0.0, 0.0), 0.5, 0.7), 2 * 0.35, 1e-12)

    exponent, _, r2 = ambit.slope_fit([8, 16, 32, 64], [8.0**-2, 16.0**-2, 32.0**-2, 64.0**-2])
    assert close(exponent, -2.0, 1e-12) and r2 > 0.999999

    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "hermite.toml"
        cfg.write_text('kind = "hermite"\np = [1.0]\nhermite_order = 10\n')
        files = ambit.run_config(str(cfg), str(Path(tmp) / "out"))
        assert any(f.endswith("report.json") for f in files)
        assert any(f.endswith("hermite.csv") for f in files)

    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
