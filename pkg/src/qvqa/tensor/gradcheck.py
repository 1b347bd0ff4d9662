"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # parameter name -> max relative error
    failures: list = field(default_factory=list)  # human-readable failure notes
    tol: float = 1e-3

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return not self.failures and self.max_error < self.tol

    def __str__(self):
        lines = [f"{name}: {err:.3e}" for name, err in self.errors.items()]
        lines += [f"FAIL {msg}" for msg in self.failures]
        return "\n".join(lines)


def relative_error(analytic, numeric, floor=1e-10):
    """Max abs difference scaled by the larger of the two gradient magnitudes.

    Scaling by the per-tensor max (rather than elementwise) keeps
    near-zero components from dominating at 32-bit precision.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def numeric_gradient(f, p, eps, idx):
    """Central differences of scalar ``f()`` w.r.t. the flat entries ``idx`` of ``p`` (perturbed in place).

    Returns (values, failures); the divisor is the step actually realised
    after rounding to the storage dtype.
    """
    flat = p.data.reshape(-1)
    numeric = np.zeros(len(idx))
    failures = []
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f().item()
        flat[i] = orig - eps
        fm = f().item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            failures.append(f"[{int(i)}]: non-finite f under perturbation")
            continue
        step = np.float64(p.dtype.type(orig + eps)) - np.float64(p.dtype.type(orig - eps))
        numeric[k] = (fp - fm) / step
    return numeric, failures


def analytic_gradients(f, items):
    for _, p in items:
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        return None, out
    out.backward()
    return {name: (np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)) for name, p in items}, out


def _items(params):
    return list(params.items()) if isinstance(params, dict) else [(f"p{i}", p) for i, p in enumerate(params)]


def _probe_indices(size, max_entries, rng):
    if max_entries is not None and size > max_entries:
        return np.sort(rng.choice(size, size=max_entries, replace=False))
    return np.arange(size)


def grad_check(f, params, eps=None, tol=None, max_entries=None, rng=None, reference=None):
    """Compare backprop gradients of scalar ``f()`` with central differences.

    ``params`` maps names to Tensors that ``f`` closes over; each is
    perturbed in place. ``max_entries`` limits how many coordinates per
    tensor are probed (chosen with ``rng``).

    ``reference=(f_ref, params_ref)`` takes the finite differences on a
    second, higher-precision copy of the problem instead (same names, same
    values); ``eps`` then defaults to the reference precision.
    """
    items = _items(params)
    dtype = items[0][1].dtype if items else np.float64
    ref_f, ref_items = (f, items) if reference is None else (reference[0], _items(reference[1]))
    ref_dtype = ref_items[0][1].dtype if ref_items else dtype
    if eps is None:
        eps = 1e-6 if ref_dtype == np.float64 else 1e-3
    if tol is None:
        tol = 1e-6 if dtype == np.float64 else 1e-3
    if eps <= 0:
        raise ValueError("eps must be positive")
    report = GradCheckReport(tol=tol)

    analytic, out = analytic_gradients(f, items)
    if analytic is None:
        report.failures.append(f"f is not finite at the base point ({out.item()})")
        return report

    rng = rng or np.random.default_rng(0)
    ref_params = dict(ref_items)
    for name, p in items:
        idx = _probe_indices(p.data.size, max_entries, rng)
        numeric, failures = numeric_gradient(ref_f, ref_params[name], eps, idx)
        report.failures.extend(f"{name}{msg}" for msg in failures)
        report.errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
    return report
