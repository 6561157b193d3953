"""Central finite-difference check of recorded gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, reset_tape


@dataclass
class LeafReport:
    name: str
    max_rel_error: float
    checked: int
    excluded: int


@dataclass
class GradcheckReport:
    leaves: list[LeafReport] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.leaves), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        lines = [f"gradcheck {'PASS' if self.passed else 'FAIL'} (tol {self.tolerance:g})"]
        for r in self.leaves:
            lines.append(
                f"  {r.name}: max rel err {r.max_rel_error:.3e} over {r.checked} elems"
                f" ({r.excluded} excluded)"
            )
        return "\n".join(lines)


def _scalar(fn) -> float:
    with no_grad():
        return float(fn().data)


def gradcheck(
    fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
) -> GradcheckReport:
    """Compare backward() against central differences for every leaf element.

    ``fn`` rebuilds the scalar graph from the current leaf values. Leaves must be
    float64. Elements sitting on a kink (relu at 0, l1 ties, clamp edges) are
    detected by disagreeing one-sided differences and excluded. Relative error
    is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    for leaf in leaves:
        if leaf.dtype != np.float64:
            raise TypeError("gradcheck needs float64 leaves")

    reset_tape()
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    backward(fn())
    analytic = [
        leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves
    ]

    report = GradcheckReport(tolerance=tolerance)
    f0 = _scalar(fn)
    for i, (leaf, ga) in enumerate(zip(leaves, analytic)):
        flat = leaf.data.reshape(-1)
        worst, excluded = 0.0, 0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            fp = _scalar(fn)
            flat[j] = orig - epsilon
            fm = _scalar(fn)
            flat[j] = orig
            fwd, bwd = (fp - f0) / epsilon, (f0 - fm) / epsilon
            if abs(fwd - bwd) > 1e-2 * max(1.0, abs(fwd), abs(bwd)):
                excluded += 1
                continue
            num = (fp - fm) / (2 * epsilon)
            a = ga.reshape(-1)[j]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report.leaves.append(
            LeafReport(leaf.name or f"leaf{i}", worst, flat.size - excluded, excluded)
        )
    return report
