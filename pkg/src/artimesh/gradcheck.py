"""Central finite-difference validation of tape gradients.

The reference is the symmetric difference (f(x+h) - f(x-h)) / 2h computed
in float64; analytic gradients come from the tape.  Relative error uses a
symmetric denominator with a small floor so near-zero gradients are judged
absolutely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import Tensor, backward


@dataclass
class CheckReport:
    name: str
    max_rel_err: float
    tol: float
    worst_coord: tuple = ()
    n_coords: int = 0
    details: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tol:.1e}, {self.n_coords} coords)")


def _rel_err(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def finite_diff_check(fn, tensors, h: float = 1e-5, tol: float = 1e-3,
                      name: str = "check", max_coords: int | None = None,
                      rng: np.random.Generator | None = None,
                      probe: str = "random") -> CheckReport:
    """Compare tape gradients of scalar fn(*tensors) against central FD.

    fn is re-evaluated from scratch for every probe, so it must be pure.
    tensors are the leaves to perturb; each gets requires_grad for the
    analytic pass.  max_coords caps the number of probed coordinates per
    tensor; probe="largest" picks the largest-|gradient| coordinates
    (coordinates whose gradient is immaterial drown in FD noise).
    """
    tensors = [t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float64)) for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None

    out = fn(*tensors)
    if out.data.size != 1:
        raise ValueError("finite_diff_check needs a scalar function")
    backward(out)
    analytic = [np.array(t.grad) if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    report = CheckReport(name=name, max_rel_err=0.0, tol=tol)
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            if probe == "largest":
                coords = np.argsort(-np.abs(analytic[ti].reshape(-1)))[:max_coords]
            else:
                gen = rng if rng is not None else np.random.default_rng(0)
                coords = gen.choice(n, size=max_coords, replace=False)
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + h
            fp = float(fn(*tensors).data)
            flat[ci] = orig - h
            fm = float(fn(*tensors).data)
            flat[ci] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[ti].reshape(-1)[ci])
            err = _rel_err(a, numeric)
            report.n_coords += 1
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst_coord = (ti, int(ci), a, numeric)
    return report


def check_suite(checks, verbose: bool = True) -> list[CheckReport]:
    """Run (name, fn, tensors, tol) tuples; returns the reports."""
    reports = []
    for name, fn, tensors, tol in checks:
        rep = finite_diff_check(fn, tensors, tol=tol, name=name)
        reports.append(rep)
        if verbose:
            print(rep)
    return reports
