"""Central finite-difference verification of analytic gradients.

The harness perturbs parameter coordinates one at a time (optionally a
subsample for large tensors), re-evaluates the scalar objective, and compares
the central difference against the gradient produced by the tape. It is the
independent oracle for every differentiable kernel and for the full training
objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor, zero_grads


class NondeterministicFunctionError(RuntimeError):
    """The objective returned different values on repeated evaluation, so the
    finite-difference comparison is invalid."""


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_coord: tuple
    n_coords: int
    per_param: dict = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def summary(self) -> str:
        status = f"max rel err {self.max_rel_err:.3e} over {self.n_coords} coords"
        if self.worst_param:
            status += f" (worst: {self.worst_param}{list(self.worst_coord)})"
        return status


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    """|a - n| / max(|a|, |n|, floor).

    The floor keeps near-zero-gradient coordinates from blowing up the ratio;
    below the floor the comparison is effectively absolute at floor * tol.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-4,
    max_coords_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``f`` must be deterministic under the caller's fixed seeding: it is
    evaluated twice at the base point and a mismatch raises
    ``NondeterministicFunctionError``. When ``max_coords_per_param`` is set,
    at most that many coordinates per parameter are probed (seeded subsample).
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(getattr(p, "name", "") or f"param{i}", p) for i, p in enumerate(params)]
    tensors = [p for _, p in named]

    base1 = float(f().data.reshape(()))
    base2 = float(f().data.reshape(()))
    if base1 != base2:
        raise NondeterministicFunctionError(
            f"objective not reproducible under fixed seed: {base1!r} != {base2!r}")

    zero_grads(tensors)
    with Tape() as tape:
        loss = f()
    tape.backward(loss)

    if rng is None:
        rng = np.random.default_rng(0)

    max_err = 0.0
    worst = ("", ())
    count = 0
    per_param = {}
    for name, p in named:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = np.arange(n)
        p_err = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = float(f().data.reshape(()))
            flat[c] = orig - h
            fm = float(f().data.reshape(()))
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            analytic = float(grad.reshape(-1)[c])
            err = relative_error(analytic, numeric, floor)
            count += 1
            if err > p_err:
                p_err = err
            if err > max_err:
                max_err = err
                worst = (name, np.unravel_index(int(c), p.shape))
        per_param[name] = p_err
    zero_grads(tensors)
    return GradCheckReport(max_err, worst[0], worst[1], count, per_param)
