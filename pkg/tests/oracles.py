"""Independent reference computations used by the test-suite."""
import numpy as np

from condist.measures import DiscreteMeasure, cdf_eval

GRID_STEP = 1e-5


def grid_cramer_sq(mu: DiscreteMeasure, nu: DiscreteMeasure, step: float = GRID_STEP) -> float:
    """Left Riemann sum of ``(F_mu - F_nu)^2`` on the lattice ``k * step``.

    Both CDFs are constant between consecutive breakpoints, so the sum over the
    grid points of each piece is its value times the point count.  Exact for
    atoms that lie on the lattice.
    """
    ks = np.unique(np.round(np.concatenate([mu.atoms, nu.atoms]) / step).astype(np.int64))
    total = 0.0
    for k0, k1 in zip(ks[:-1], ks[1:]):
        w = float(k0) * step
        d = cdf_eval(mu, w) - cdf_eval(nu, w)
        total += d * d * (int(k1) - int(k0)) * step
    return total


def enumerated_grid_cramer_sq(mu, nu, step=GRID_STEP) -> float:
    """Grid sum evaluated point by point; only practical on narrow supports."""
    lo = min(mu.atoms[0], nu.atoms[0])
    hi = max(mu.atoms[-1], nu.atoms[-1])
    k = np.arange(int(np.round(lo / step)), int(np.round(hi / step)))
    w = k * step
    Fm = np.concatenate([[0.0], np.cumsum(mu.masses)])[np.searchsorted(mu.atoms, w, side="right")]
    Fn = np.concatenate([[0.0], np.cumsum(nu.masses)])[np.searchsorted(nu.atoms, w, side="right")]
    return float(np.sum((Fm - Fn) ** 2) * step)


def energy_cramer_sq(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """``E|X-Y| - (E|X-X'| + E|Y-Y'|) / 2``, equal to the squared Cramer distance in one dimension."""
    def mean_abs(a, p, b, q):
        return float(p @ np.abs(a[:, None] - b[None, :]) @ q)

    x, p, y, q = mu.atoms, mu.masses, nu.atoms, nu.masses
    return mean_abs(x, p, y, q) - 0.5 * (mean_abs(x, p, x, p) + mean_abs(y, q, y, q))


def random_lattice_measure(rng, n_max=32, lo=-100.0, hi=100.0, step=GRID_STEP) -> DiscreteMeasure:
    from condist.measures import make_measure

    n = int(rng.integers(1, n_max + 1))
    k = rng.integers(int(lo / step), int(hi / step) + 1, size=n)
    p = rng.dirichlet(np.ones(n))
    return make_measure(k * step, p)


def random_measure(rng, n_max=32, lo=-100.0, hi=100.0) -> DiscreteMeasure:
    from condist.measures import make_measure

    n = int(rng.integers(1, n_max + 1))
    return make_measure(rng.uniform(lo, hi, n), rng.dirichlet(np.ones(n)))


def central_difference(f, x: np.ndarray, step: float) -> np.ndarray:
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        g.flat[i] = (f(xp) - f(xm)) / (2 * step)
    return g
