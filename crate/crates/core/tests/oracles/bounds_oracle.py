"""Arbitrary-precision reference values for the bound expressions.

Run `python3 bounds_oracle.py` and redirect the output into bounds_values.rs.
"""
from mpmath import mp, mpf, sqrt, log, log10, nstr

mp.dps = 60


def covering(m):
    return (4 * sqrt(m)) ** m


def with_radicand(L, G, m, zeta, delta):
    return 4 * mpf(L) ** G + 2 * mpf(L) * m + 2 * zeta + 2 * log(1 / mpf(delta))


def without_radicand(m, zeta, delta):
    return 4 * covering(m) + 2 * zeta + 2 * log(1 / mpf(delta))


def bound(cj, radicand, n, ld, rho, varsigma=0, radius=0):
    return cj * sqrt(radicand / n) + sqrt(mpf(ld) ** (mpf(2) / rho) / n) + varsigma * radius


def lit(x):
    return nstr(x, 20, min_fixed=-1, max_fixed=-1).replace("e+", "e")


print("pub const COVERING: [(u32, f64); 64] = [")
for m in range(1, 65):
    print(f"    ({m}, {lit(covering(m))}),")
print("];")

L, G, m, zeta, delta, n = 64, 4, 16, 100, mpf("0.05"), 10000
w = with_radicand(L, G, m, zeta, delta)
wo = without_radicand(m, zeta, delta)
print(f"pub const WITH_RADICAND: f64 = {lit(w)};")
print(f"pub const WITHOUT_RADICAND: f64 = {lit(wo)};")
print(f"pub const RATIO_LOG10: f64 = {lit(log10(wo / w))};")
print(f"pub const WITH_BOUND: f64 = {lit(bound(1, w, n, 1, 1))};")
print(f"pub const WITHOUT_BOUND: f64 = {lit(bound(1, wo, n, 1, 1))};")
