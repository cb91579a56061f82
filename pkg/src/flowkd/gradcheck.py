"""Compare tape gradients against central finite differences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, get_default_dtype, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    excluded: dict[str, int] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def __str__(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} worst={self.worst:.3e} tol={self.tol:.1e}"]
        for name, err in self.max_rel_error.items():
            lines.append(f"  {name}: {err:.3e} (excluded {self.excluded.get(name, 0)})")
        return "\n".join(lines)


def gradient_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor] | list[Tensor],
                   step: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6,
                   kink_tol: float = 1e-2, max_entries: int | None = None,
                   rng: np.random.Generator | None = None) -> GradCheckReport:
    """Max relative error, per parameter block, of autodiff vs. central differences.

    Relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``.  Entries
    where the one-sided differences disagree by more than ``kink_tol``
    (relative) sit on a non-differentiable point such as relu at 0; they are
    excluded and counted in ``report.excluded``.  ``max_entries`` samples a
    random subset of each block to bound the cost on large models.
    """
    if get_default_dtype() != np.float64:
        raise RuntimeError("gradient checks require 64-bit mode")
    if not isinstance(params, Mapping):
        params = {f"param{i}": p for i, p in enumerate(params)}
    rng = rng if rng is not None else np.random.default_rng(0)

    for p in params.values():
        p.data = np.ascontiguousarray(p.data)
        p.zero_grad()
    loss_fn().backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    errors, excluded = {}, {}
    with no_grad():
        base = loss_fn().item()
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
            worst, skipped = 0.0, 0
            a_flat = analytic[name].reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                fwd, bwd = (up - base) / step, (base - down) / step
                if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                    skipped += 1
                    continue
                num = (up - down) / (2 * step)
                a = a_flat[i]
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
            errors[name] = worst
            excluded[name] = skipped
    for p in params.values():
        p.zero_grad()
    return GradCheckReport(errors, excluded, tol)
