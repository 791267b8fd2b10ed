"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import ParamStore, Tensor, backward

DEFAULT_STEP = 1e-4


@dataclass
class Offender:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    deterministic: bool
    max_rel_error: float = 0.0
    per_param: dict[str, float] = field(default_factory=dict)
    worst: list[Offender] = field(default_factory=list)
    n_checked: int = 0

    @property
    def passed(self) -> bool | None:
        """True/False verdict, or None when the closure was not deterministic."""
        if not self.deterministic:
            return None
        return self.max_rel_error < self.tolerance

    def format(self) -> str:
        lines = [
            f"checked {self.n_checked} entries, step={self.step:g}, tolerance={self.tolerance:g}",
        ]
        if not self.deterministic:
            lines.append("closure is not deterministic: no verdict")
            return "\n".join(lines)
        lines.append(f"max relative error {self.max_rel_error:.3e} -> {'PASS' if self.passed else 'FAIL'}")
        for o in self.worst:
            lines.append(
                f"  {o.name}{list(o.index)}: analytic={o.analytic:+.6e} numeric={o.numeric:+.6e} rel={o.rel_error:.3e}"
            )
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def gradient_check(
    closure: Callable[[ParamStore], Tensor],
    store: ParamStore,
    step: float = DEFAULT_STEP,
    tolerance: float = 1e-4,
    n_worst: int = 5,
    names: list[str] | None = None,
) -> GradCheckReport:
    """Compare backprop gradients of ``closure(store)`` against central differences.

    ``closure`` must rebuild the graph from the store's current values each
    time it is called.  Parameters are restored exactly after perturbation.
    """
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    names = names if names is not None else store.names()

    store.zero_grad()
    loss = closure(store)
    first = float(loss.value)
    backward(loss, store)
    analytic = {n: store.grads[n].copy() for n in names}
    store.zero_grad()

    second = float(closure(store).value)
    report = GradCheckReport(tolerance=tolerance, step=step, deterministic=first == second)
    if not report.deterministic:
        return report

    offenders: list[Offender] = []
    for name in names:
        param = store.params[name]
        numeric = np.zeros_like(param)
        flat = param.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(closure(store).value)
            flat[i] = orig - step
            down = float(closure(store).value)
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * step)
        store.zero_grad()
        rel = relative_error(analytic[name], numeric)
        report.n_checked += rel.size
        report.per_param[name] = float(rel.max()) if rel.size else 0.0
        for flat_idx in np.argsort(rel, axis=None)[::-1][:n_worst]:
            idx = np.unravel_index(flat_idx, rel.shape)
            offenders.append(
                Offender(name, tuple(int(i) for i in idx), float(analytic[name][idx]), float(numeric[idx]), float(rel[idx]))
            )
    offenders.sort(key=lambda o: o.rel_error, reverse=True)
    report.worst = offenders[:n_worst]
    report.max_rel_error = max(report.per_param.values(), default=0.0)
    return report
