"""Regenerate the stored AR(1) series used by the ESS tests.

    python3 tests/fixtures/make_fixtures.py
"""

from pathlib import Path

import numpy as np

HERE = Path(__file__).parent
SERIES = {"ar1_0.0": 0.0, "ar1_0.5": 0.5, "ar1_0.9": 0.9, "ar1_0.99": 0.99, "ar1_neg0.5": -0.5}


def ar1(phi, n, rng):
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0] / np.sqrt(1.0 - phi * phi)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    return x


def main():
    rng = np.random.default_rng(20240611)
    arrays = {name: ar1(phi, 20_000, rng) for name, phi in SERIES.items()}
    np.savez_compressed(HERE / "ar1_series.npz", **arrays)


if __name__ == "__main__":
    main()
