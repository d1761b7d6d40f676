"""Smoke test for the gbsvie Python extension.

Build and install the extension first, for example:

    maturin build --release -m crates/py/Cargo.toml
    pip install target/wheels/gbsvie-*.whl

then run `python python/smoke_test.py` (or `pytest python/`).
"""

import json
import math

import gbsvie

SQUARE = {
    "band": {"sigma_lo": 0.5, "sigma_hi": 1.0},
    "grid": {"T": 1.0, "n_t": 40},
    "generator": "0",
    "terminal": "x^2",
}


def problem(**overrides):
    spec = json.loads(json.dumps(SQUARE))
    spec.update(overrides)
    return gbsvie.Problem(json.dumps(spec))


def test_g_function_picks_the_band_end():
    assert gbsvie.g_function(2.0, 0.5, 1.0) == 1.0
    assert gbsvie.g_function(-2.0, 0.5, 1.0) == -0.25


def test_invalid_band_raises_value_error():
    spec = dict(SQUARE, band={"sigma_lo": 1.5, "sigma_hi": 1.0})
    try:
        gbsvie.Problem(json.dumps(spec))
    except ValueError as e:
        assert "band violates" in str(e)
    else:
        raise AssertionError("expected ValueError")


def test_g_expectation_of_square_is_the_upper_variance():
    p = problem()
    assert abs(p.g_expectation("x^2") - 1.0) < 5e-3
    assert abs(p.g_expectation("-x^2") + 0.25) < 5e-3


def test_solve_returns_fields_of_the_grid_shape():
    p = problem()
    sol = p.solve()
    assert len(sol.y) == p.n_t + 1 and len(sol.y[0]) == p.n_x
    assert abs(sol.y_at(0, 0.0) - 1.0) < 5e-3
    assert len(sol.z(0)) == p.n_t + 1
    assert set(v for row in sol.sig_star(5) for v in row) <= {0.5, 1.0}
    assert sol.plan["intervals"]
    assert sol.diagnostics["intervals"] >= 1


def mean_and_stderr(xs):
    m = sum(xs) / len(xs)
    var = sum((x - m) ** 2 for x in xs) / (len(xs) - 1)
    return m, math.sqrt(var / len(xs))


def test_k_means_under_constant_controls():
    # K(0, T) tracks <B>_T - sigma_hi^2 T, so its mean is 0 under sigma_hi
    # and (sigma_lo^2 - sigma_hi^2) T under sigma_lo
    sol = problem().solve()
    for sigma, expected in [(1.0, 0.0), (0.5, -0.75)]:
        ks = sol.k_samples(400, seed=1, control=sigma, substeps=16)
        assert len(ks) == 400
        m, se = mean_and_stderr(ks)
        assert abs(m - expected) <= 3 * se + 1e-2, (sigma, m, se)


def test_classical_ode():
    p = gbsvie.Problem(json.dumps({
        "band": {"sigma_lo": 1.0, "sigma_hi": 1.0},
        "grid": {"T": 1.0, "n_t": 50, "half_width": 4.0},
        "generator": {"expr": "0.5*y", "L": 0.5},
        "terminal": "1",
    }))
    sol = p.solve()
    for t, row in zip(p.times, sol.y):
        assert max(abs(v - math.exp(0.5 * (1 - t))) for v in row) < 1e-2


def test_compare_and_audit_refusal():
    upper, lower = problem(generator="1"), problem()
    report = gbsvie.compare(upper, lower, chained=True)
    assert report["passed"] and report["ladder"]["monotone"]
    try:
        gbsvie.compare(lower, upper)
    except gbsvie.AuditRefused:
        pass
    else:
        raise AssertionError("expected AuditRefused")


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for t in tests:
        t()
        print(f"ok  {t.__name__}")
    print(f"{len(tests)} passed")
