"""Central finite-difference gradient oracle."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_STEP = 1e-5
# gradients below this magnitude are compared in absolute terms
REL_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    probed_coordinates: int
    step: float
    tol: float = 1e-4

    @property
    def passed(self):
        return self.max_rel_error <= self.tol

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max_rel={self.max_rel_error:.3e} "
                f"max_abs={self.max_abs_error:.3e} probes={self.probed_coordinates}")


def finite_diff_grad(f, theta, probes, step=DEFAULT_STEP):
    """Estimate ``df/dtheta`` at the flat indices ``probes`` by central differences.

    ``theta`` is perturbed in place and restored afterwards, so ``f`` may close
    over it.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    flat = theta.reshape(-1)
    if not np.shares_memory(flat, theta):
        raise ValueError("theta must be contiguous so it can be perturbed in place")
    out = np.empty(len(probes), dtype=np.float64)
    for j, i in enumerate(probes):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value while probing index {i}")
        out[j] = (fp - fm) / (2.0 * step)
    return out


def relative_error(analytic, numeric, floor=REL_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def allocate_probes(sizes, total, rng):
    """Spread ``total`` probes over arrays of the given sizes (at least one each)."""
    sizes = np.asarray(sizes)
    counts = np.maximum(1, np.round(total * sizes / sizes.sum()).astype(int))
    counts = np.minimum(counts, sizes)
    while counts.sum() < min(total, sizes.sum()):
        room = np.flatnonzero(counts < sizes)
        counts[room[np.argmax(sizes[room] - counts[room])]] += 1
    return [np.sort(rng.choice(s, size=c, replace=False)) for s, c in zip(sizes, counts)]


def compare(name, loss_fn, arrays, grads, n_probes, rng, step=DEFAULT_STEP, tol=1e-4):
    """Check analytic ``grads`` against finite differences of ``loss_fn``.

    ``arrays`` and ``grads`` are parallel lists; ``loss_fn()`` must read the
    current contents of ``arrays``.
    """
    probes = allocate_probes([a.size for a in arrays], n_probes, rng)
    max_rel = max_abs = 0.0
    count = 0
    for arr, g, idx in zip(arrays, grads, probes):
        num = finite_diff_grad(loss_fn, arr, idx, step)
        ana = np.asarray(g).reshape(-1)[idx]
        max_rel = max(max_rel, float(relative_error(ana, num).max()))
        max_abs = max(max_abs, float(np.abs(ana - num).max()))
        count += len(idx)
    return GradCheckReport(name, max_rel, max_abs, count, step, tol)
