"""Central-difference verification of tape gradients.

Every equation implemented in this package is checked against the same
finite-difference probe: perturb one parameter element at a time by
``h = max(1e-6, 1e-4 * |x|)`` and compare ``(f(x+h) - f(x-h)) / 2h`` with the
analytic gradient.  Relative error uses a small denominator floor so that
near-zero gradients are compared at an absolute tolerance of
``rel_tol * floor`` instead of amplifying finite-difference roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import GRAPH, NonFiniteError, Tensor, backward, no_grad, zero_grads


@dataclass
class ParamReport:
    name: str
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float

    def line(self, rel_tol: float) -> str:
        verdict = "ok" if self.max_rel_err <= rel_tol else "FAIL"
        return (
            f"{self.name}: max_rel_err={self.max_rel_err:.3e} "
            f"(analytic={self.analytic:.6e}, fd={self.numeric:.6e} at {self.worst_index}) {verdict}"
        )


@dataclass
class GradCheckReport:
    rel_tol: float
    params: list

    @property
    def passed(self) -> bool:
        return all(p.max_rel_err <= self.rel_tol for p in self.params)

    @property
    def worst(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    def summary(self) -> str:
        lines = [p.line(self.rel_tol) for p in self.params]
        lines.append(f"worst={self.worst:.3e} rel_tol={self.rel_tol:.1e} "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _checked_eval(f, context: str) -> float:
    loss = f()
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValueError("grad_check: f must return a scalar Tensor")
    if not np.isfinite(loss.data).all():
        for op in GRAPH.ops:
            if not np.isfinite(op.output.data).all():
                raise NonFiniteError(f"non-finite value produced by op '{op.name}' {context}")
        raise NonFiniteError(f"non-finite loss {context}")
    return float(loss.data)


def grad_check(f, params, rel_tol: float = 1e-4, denom_floor: float = 1e-2) -> GradCheckReport:
    """Compare analytic gradients of the scalar function ``f`` against central
    differences for every element of every parameter.

    ``params`` is a list of ``(name, Tensor)`` pairs; all must be float64 with
    ``requires_grad`` set.  ``f`` takes no arguments and must recompute the
    loss from the current parameter values.
    """
    params = list(params)
    for name, p in params:
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check: parameter '{name}' must be float64")
        if not p.requires_grad:
            raise ValueError(f"grad_check: parameter '{name}' does not require grad")

    GRAPH.reset()
    zero_grads([p for _, p in params])
    loss = f()
    _checked_eval(lambda: loss, "during the analytic forward pass")
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params
    }
    GRAPH.reset()
    zero_grads([p for _, p in params])

    reports = []
    with no_grad():
        for name, p in params:
            flat = p.data.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            worst = (0.0, 0, 0.0, 0.0)
            for i in range(flat.size):
                x0 = flat[i]
                h = max(1e-6, 1e-4 * abs(x0))
                flat[i] = x0 + h
                fp = _checked_eval(f, f"while probing '{name}'")
                flat[i] = x0 - h
                fm = _checked_eval(f, f"while probing '{name}'")
                flat[i] = x0
                fd = (fp - fm) / (2.0 * h)
                a = a_flat[i]
                err = abs(a - fd) / max(abs(a), abs(fd), denom_floor)
                if err > worst[0]:
                    worst = (err, i, a, fd)
            idx = np.unravel_index(worst[1], p.data.shape) if p.data.ndim else ()
            reports.append(ParamReport(name, worst[0], tuple(int(k) for k in idx),
                                       float(worst[2]), float(worst[3])))
    return GradCheckReport(rel_tol=rel_tol, params=reports)
