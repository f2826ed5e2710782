"""Central finite-difference verification of reverse-mode gradients.

The loss callable must rebuild its graph from the parameters' current data
on every call; the checker perturbs one entry at a time and compares the
two-sided difference quotient against the taped gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Relative error uses a floored denominator so parameters whose true
# gradient is ~0 are not failed on finite-difference roundoff noise.
DENOM_FLOOR = 1e-3


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    worst_entry: int


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    checks: list

    @property
    def passed(self):
        return all(c.max_rel_err < self.tol for c in self.checks)

    def failures(self):
        return [c for c in self.checks if c.max_rel_err >= self.tol]

    def worst(self, n=5):
        return sorted(self.checks, key=lambda c: -c.max_rel_err)[:n]

    def summary_lines(self):
        lines = []
        for c in sorted(self.checks, key=lambda c: -c.max_rel_err):
            verdict = "ok" if c.max_rel_err < self.tol else "FAIL"
            lines.append(f"{verdict:4s} {c.name:s}  max_rel_err={c.max_rel_err:.3e}")
        return lines


def finite_difference_check(params, loss_fn, eps=1e-5, tol=1e-4, flip_sign_of=None):
    """Compare taped gradients of ``loss_fn()`` against central differences.

    ``params`` maps names to requires_grad tensors. ``flip_sign_of`` is a
    fault-injection hook: the named parameter's analytic gradient is negated
    before comparison, which must make the check fail.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {}
    for name, p in params.items():
        g = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        if name == flip_sign_of:
            g = -g
        analytic[name] = g

    checks = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        an = analytic[name].reshape(-1)
        worst = 0.0
        worst_i = -1
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            denom = max(abs(fd), abs(an[i]), DENOM_FLOOR)
            rel = abs(fd - an[i]) / denom
            if rel > worst:
                worst = rel
                worst_i = i
        checks.append(ParamCheck(name=name, max_rel_err=worst, worst_entry=worst_i))
    return GradCheckReport(eps=eps, tol=tol, checks=checks)
