"""Central finite-difference validation of tape gradients.

Runs in double precision.  For large parameter sets a deterministic random
subsample of elements per parameter keeps the check fast; the tape gradient
is still computed for every element in one backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Rng, Tape, Tensor, backward


@dataclass
class ElementResult:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    tol: float
    passed: bool
    worst: ElementResult | None
    results: list[ElementResult] = field(default_factory=list)

    def summary(self) -> str:
        w = self.worst
        status = "PASS" if self.passed else "FAIL"
        if w is None:
            return f"{status} (no elements checked)"
        return (
            f"{status} worst rel err {w.rel_error:.3e} at {w.param}{list(w.index)} "
            f"(analytic {w.analytic:.6e}, numeric {w.numeric:.6e}, tol {self.tol:g})"
        )


def _rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-3,
    tol: float = 1e-4,
    max_elements_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of scalar-valued f against central differences.

    f must be a pure function of the given parameters (same tensors each call).
    Parameters are expected to hold float64 data.
    """
    for p in params:
        if p.value.data.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 parameters ({p.name})")
        p.zero_grad()

    with Tape() as tape:
        loss = f()
        backward(loss, tape)
    analytic = {p.name: p.grad.copy() for p in params}

    rng = Rng(seed)
    results: list[ElementResult] = []
    for p in params:
        flat = p.value.data.reshape(-1)
        n = flat.size
        if max_elements_per_param is not None and n > max_elements_per_param:
            idxs = rng.permutation(n)[:max_elements_per_param]
        else:
            idxs = np.arange(n)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[p.name].reshape(-1)[i])
            results.append(
                ElementResult(
                    param=p.name,
                    index=tuple(int(j) for j in np.unravel_index(int(i), p.value.shape)),
                    analytic=ana,
                    numeric=num,
                    rel_error=_rel_error(ana, num),
                )
            )

    worst = max(results, key=lambda r: r.rel_error) if results else None
    passed = worst is None or worst.rel_error < tol
    return GradCheckReport(tol=tol, passed=passed, worst=worst, results=results)
