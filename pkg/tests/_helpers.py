"""Finite-difference oracles shared by the gradient tests."""
import numpy as np


def central_diff(f, x, step=1e-3):
    """Gradient of scalar ``f`` at array ``x`` (perturbed in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_error(analytic, numeric):
    """max |a - n| normalised by the larger max-magnitude of the two."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
    return float(np.abs(a - n).max() / scale)


def away_from_zero(rng, shape, margin=0.05):
    """Random normals with no entry inside (-margin, margin): keeps ReLU kinks out of FD stencils."""
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def distinct_values(rng, shape, spacing=0.05):
    """Random permutation of evenly spaced values: no near-ties inside pooling windows."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape).astype(np.float64)
