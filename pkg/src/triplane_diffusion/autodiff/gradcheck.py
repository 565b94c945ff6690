"""Finite-difference gradient checking.

The checker is deliberately independent of the backward rules it
validates: it only calls the forward path, perturbing one parameter
element at a time and forming central differences.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonDeterministicError, Tape, Tensor, backward, no_grad


@dataclass
class ParamReport:
    name: str
    max_rel_err: float
    n_compared: int
    passed: bool


@dataclass
class GradCheckReport:
    params: list = field(default_factory=list)
    passed: bool = True

    def __str__(self):
        lines = [
            f"  {p.name}: max_rel_err={p.max_rel_err:.3e} "
            f"over {p.n_compared} elements -> {'ok' if p.passed else 'FAIL'}"
            for p in self.params
        ]
        verdict = "PASS" if self.passed else "FAIL"
        return f"grad_check {verdict}\n" + "\n".join(lines)


def _forward_value(f, params):
    with no_grad():
        out = f(params)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("grad_check requires f to return a scalar Tensor")
    return float(out.data)


def grad_check(f, params, step=1e-3, tol=1e-4, fd_floor=1e-6, names=None):
    """Compare analytic gradients of ``f(params)`` against central
    finite differences.

    Elements whose finite-difference magnitude is at most ``fd_floor``
    are skipped; the relative error of the rest must stay below ``tol``.
    ``f`` must be deterministic given ``params`` (checked by evaluating
    it twice) and should run in double precision for the comparison to
    be meaningful.
    """
    params = list(params)
    if names is None:
        names = [f"param{i}" for i in range(len(params))]

    y0 = _forward_value(f, params)
    y1 = _forward_value(f, params)
    if y0 != y1:
        raise NonDeterministicError(
            f"f is not deterministic: two forward passes gave {y0!r} and {y1!r}")

    for p in params:
        p.zero_grad()
    with Tape():
        loss = f(params)
        backward(loss)
    analytic = [p.grad_or_zeros().copy() for p in params]

    report = GradCheckReport()
    for p, name, an in zip(params, names, analytic):
        flat = p.data.ravel()
        an_flat = an.ravel()
        max_rel = 0.0
        n_compared = 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            y_plus = _forward_value(f, params)
            flat[i] = orig - step
            y_minus = _forward_value(f, params)
            flat[i] = orig
            fd = (y_plus - y_minus) / (2.0 * step)
            if abs(fd) <= fd_floor:
                continue
            n_compared += 1
            rel = abs(an_flat[i] - fd) / abs(fd)
            if rel > max_rel:
                max_rel = rel
        ok = max_rel <= tol
        report.params.append(ParamReport(name, max_rel, n_compared, ok))
        report.passed &= ok
    return report
