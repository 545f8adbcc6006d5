"""Central-difference verification of analytic gradients.

The checker perturbs selected entries of each input tensor by +/- h,
re-evaluates the scalar function, and compares (f(x+h) - f(x-h)) / (2h)
against the gradient produced by the reverse pass. An entry passes when
the relative error is within ``rel_tol``, or, for near-zero gradients
(both estimates below ``small``), when the absolute error is within
``abs_tol``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DiffTensor


@dataclass
class EntryCheck:
    """Comparison record for a single perturbed tensor entry."""

    tensor: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    abs_err: float
    rel_err: float
    ok: bool


@dataclass
class GradCheckReport:
    """Aggregate result of a gradient check over one or more tensors."""

    passed: bool
    checked: int
    max_rel_err: float
    max_abs_err: float
    failures: list[EntryCheck] = field(default_factory=list)
    entries: list[EntryCheck] = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: {self.checked} entries checked, "
            f"max rel err {self.max_rel_err:.3e}, "
            f"max abs err {self.max_abs_err:.3e}, "
            f"{len(self.failures)} failures"
        )


def check_gradients(
    fn,
    tensors: dict[str, DiffTensor],
    h: float = 1e-5,
    rel_tol: float = 1e-6,
    abs_tol: float = 1e-4,
    small: float = 1e-3,
    max_entries_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central differences.

    Parameters
    ----------
    fn:
        Zero-argument callable that evaluates the scalar loss from the
        current contents of ``tensors`` and returns a scalar DiffTensor.
        It must rebuild the graph on every call so perturbed values are
        picked up.
    tensors:
        Named leaf tensors with ``requires_grad=True`` to check.
    h:
        Central-difference step.
    rel_tol, abs_tol, small:
        An entry passes if rel err <= rel_tol, or if both the analytic and
        numeric derivatives are below ``small`` in magnitude and the
        absolute error is <= abs_tol.
    max_entries_per_tensor:
        When set, check a random sample of at most this many entries per
        tensor instead of every entry. Every tensor is always touched.
    rng:
        Source of sampling randomness (required when sampling).
    """
    for name, t in tensors.items():
        if not isinstance(t, DiffTensor) or not t.requires_grad:
            raise ValueError(f"gradcheck: tensor {name!r} must require gradients")
        t.zero_grad()

    out = fn()
    if out.size != 1:
        raise ValueError("gradcheck: fn must return a scalar")
    out.backward()
    analytic = {}
    for name, t in tensors.items():
        analytic[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        t.zero_grad()

    entries: list[EntryCheck] = []
    failures: list[EntryCheck] = []
    max_rel = 0.0
    max_abs = 0.0

    for name, t in tensors.items():
        flat_indices = np.arange(t.size)
        if max_entries_per_tensor is not None and t.size > max_entries_per_tensor:
            if rng is None:
                raise ValueError("gradcheck: sampling requires an rng")
            flat_indices = rng.choice(t.size, size=max_entries_per_tensor, replace=False)
        flat = t.data.ravel()
        for fi in flat_indices:
            fi = int(fi)
            original = flat[fi]
            flat[fi] = original + h
            f_plus = fn().item()
            flat[fi] = original - h
            f_minus = fn().item()
            flat[fi] = original

            numeric = (f_plus - f_minus) / (2.0 * h)
            ana = float(analytic[name].ravel()[fi])
            abs_err = abs(ana - numeric)
            denom = max(abs(ana), abs(numeric))
            rel_err = abs_err / denom if denom > 0.0 else 0.0
            if rel_err <= rel_tol:
                ok = True
            elif abs(ana) < small and abs(numeric) < small:
                ok = abs_err <= abs_tol
            else:
                ok = False

            rec = EntryCheck(
                tensor=name,
                index=tuple(int(i) for i in np.unravel_index(fi, t.shape)),
                analytic=ana,
                numeric=numeric,
                abs_err=abs_err,
                rel_err=rel_err,
                ok=ok,
            )
            entries.append(rec)
            max_rel = max(max_rel, rel_err)
            max_abs = max(max_abs, abs_err)
            if not ok:
                failures.append(rec)

    return GradCheckReport(
        passed=not failures,
        checked=len(entries),
        max_rel_err=max_rel,
        max_abs_err=max_abs,
        failures=failures,
        entries=entries,
    )
