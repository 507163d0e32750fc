"""Finite-difference verification of reverse-mode gradients.

Central differences with step 1e-5 in float64. Relative error per element is
|analytic - numeric| / max(|analytic|, |numeric|, 1.0), so near-zero
gradients are compared absolutely.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["GradCheckReport", "grad_check"]

DEFAULT_STEP = 1e-5
OP_TOLERANCE = 1e-4
BLOCK_TOLERANCE = 1e-3


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tolerance: float
    per_input: list[float] = field(default_factory=list)
    probes: int = 0

    def __str__(self) -> str:
        word = "pass" if self.passed else "FAIL"
        return f"{word} (max rel err {self.max_rel_error:.3e}, tol {self.tolerance:.0e}, {self.probes} probes)"


def _rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    *,
    step: float = DEFAULT_STEP,
    tolerance: float = OP_TOLERANCE,
    rng: np.random.Generator | None = None,
    max_probes_per_input: int | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must be deterministic and read the tensors in ``inputs`` (they
    are perturbed in place between evaluations). When
    ``max_probes_per_input`` is set, that many elements per tensor are
    sampled with ``rng`` instead of probing every element.
    """
    for t in inputs:
        if not t.requires_grad:
            raise ValueError("grad_check inputs must require gradients")
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [t.grad_or_zero().copy() for t in inputs]
    for t in inputs:
        t.grad = None

    max_err = 0.0
    per_input: list[float] = []
    probes = 0
    for t, grads in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_probes_per_input is not None and n > max_probes_per_input:
            if rng is None:
                raise ValueError("sampled probing needs an rng")
            positions = rng.choice(n, size=max_probes_per_input, replace=False)
        else:
            positions = np.arange(n)
        worst = 0.0
        for pos in positions:
            pos = int(pos)
            original = flat[pos]
            flat[pos] = original + step
            hi = fn().item()
            flat[pos] = original - step
            lo = fn().item()
            flat[pos] = original
            numeric = (hi - lo) / (2.0 * step)
            err = _rel_error(float(grads.reshape(-1)[pos]), numeric)
            worst = max(worst, err)
            probes += 1
        per_input.append(worst)
        max_err = max(max_err, worst)
    return GradCheckReport(
        passed=max_err <= tolerance,
        max_rel_error=max_err,
        tolerance=tolerance,
        per_input=per_input,
        probes=probes,
    )
