"""Projections onto the simplex, the unit box, and their intersection.

The feasible set for a cardinality budget ``z`` over ``L`` labels is

    Z = { y : 0 <= y_i <= 1,  sum_i y_i = z },

the simplex scaled to mass ``z`` and capped at one per coordinate.  Three
routes onto it are implemented:

* ``project_capped_exact`` solves the Euclidean projection in closed form
  by scanning the breakpoints of the piecewise-linear mass function
  g(lam) = sum_i clamp(v_i - lam, 0, 1).
* ``project_capped_bisection`` solves the same root-finding problem by a
  long scalar bisection.  It exists purely as an independent oracle.
* ``project_capped_dykstra`` alternates between the unit upper box and the
  scaled simplex with Dykstra correction terms.  In ``soft`` mode every
  step is a differentiable surrogate recorded on a tape, which is what the
  unrolled inference layers use.

``project_capped_fast_soft`` is a differentiable variant of the scan: a
fixed number of bisection steps where the active-set boundaries are located
with soft one-hot weights, finished by a casewise clamp.

Exact operators take plain numpy arrays.  Soft operators take tape nodes
and return tape nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .diffgraph import Var

# calibrated so two soft Dykstra rounds hold trajectory states within the
# feasibility tolerances used by the inference invariants
DEFAULT_SHARPNESS = 20.0
DEFAULT_ROUNDS = 2

__all__ = [
    "CappedSimplexSpec",
    "ProjectionResult",
    "InfeasibleSpecError",
    "project_simplex_exact",
    "project_simplex_soft",
    "project_box_upper",
    "project_capped_exact",
    "project_capped_bisection",
    "project_capped_dykstra",
    "project_capped_fast_soft",
    "project_matrix_rows_cols",
    "matrix_residuals",
    "DEFAULT_SHARPNESS",
    "DEFAULT_ROUNDS",
]


class InfeasibleSpecError(ValueError):
    """The requested mass budget cannot be met inside the unit box."""


@dataclass(frozen=True)
class CappedSimplexSpec:
    """Feasible-set description: dimension and mass budget.

    The mass may be a float or a scalar tape node; a node's current value
    is validated, and soft projections keep it on the graph so gradients
    reach whatever predicted the budget.
    """

    dim: int
    mass: object

    def __post_init__(self):
        if self.dim < 1:
            raise InfeasibleSpecError(f"dimension must be positive, got {self.dim}")
        mass_value = float(self.mass.value) if isinstance(self.mass, Var) else float(self.mass)
        if not 0.0 <= mass_value <= self.dim:
            raise InfeasibleSpecError(
                f"mass budget {mass_value} outside [0, {self.dim}]"
            )

    @property
    def mass_value(self) -> float:
        return float(self.mass.value) if isinstance(self.mass, Var) else float(self.mass)


@dataclass
class ProjectionResult:
    """Projected point plus feasibility diagnostics.

    ``residual_sum`` is |sum(y) - mass| and ``residual_box`` the largest
    excursion outside [0, 1], both measured on the returned values.
    """

    y: object  # Var in soft mode, ndarray in exact mode
    residual_sum: float
    residual_box: float
    iterations: int

    def values(self) -> np.ndarray:
        return self.y.value if isinstance(self.y, Var) else self.y


def _residuals(values: np.ndarray, mass: float) -> tuple[float, float]:
    box = max(0.0, float((-values).max()), float((values - 1.0).max()))
    return abs(float(values.sum()) - float(mass)), box


# ---------------------------------------------------------------------------
# exact operators


def project_simplex_exact(v: np.ndarray, mass: float = 1.0) -> np.ndarray:
    """Euclidean projection onto { y >= 0, sum y = mass }.

    Sorted-pivot method: with mu the descending sort of v and cumulative
    sums cssv, the pivot index is the largest rho such that
    mu_rho - (cssv_rho - mass) / rho > 0, and every coordinate is shifted
    down by theta = (cssv_rho - mass) / rho, then floored at zero.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("expected a non-empty vector")
    if mass <= 0:
        raise InfeasibleSpecError(f"simplex mass must be positive, got {mass}")
    mu = np.sort(v)[::-1]
    cssv = np.cumsum(mu)
    idx = np.arange(1, v.size + 1)
    rho = idx[mu - (cssv - mass) / idx > 0][-1]
    theta = (cssv[rho - 1] - mass) / rho
    return np.maximum(v - theta, 0.0)


def project_box_upper(y):
    """Projection onto { y <= 1 }: clamp from above only.

    Accepts a tape node or an ndarray; the tape form has gradient one
    strictly below the cap and zero above it.
    """
    if isinstance(y, Var):
        return dg.clip(y, hi=1.0)
    return np.minimum(np.asarray(y, dtype=np.float64), 1.0)


def _capped_pivot(v: np.ndarray, mass: float) -> tuple[np.ndarray, float]:
    """Projection onto the capped simplex, returning (point, threshold).

    The optimal point is clamp(v - lam, 0, 1) where lam solves
    g(lam) = sum_i clamp(v_i - lam, 0, 1) = mass.  g is piecewise linear
    and non-increasing with breakpoints at v_i and v_i - 1, so the root is
    found by bracketing over breakpoints and solving the linear piece:
    with n1 coordinates clamped at one and an active set A strictly inside
    (0, 1), lam = (sum_{i in A} v_i - (mass - n1)) / |A|.
    """
    L = v.size
    if mass <= 0.0:
        return np.zeros(L), float(v.max())
    if mass >= L:
        return np.ones(L), float(v.min() - 1.0)

    bps = np.unique(np.concatenate([v, v - 1.0]))
    masses = np.clip(v[None, :] - bps[:, None], 0.0, 1.0).sum(axis=1)
    # masses is non-increasing in lam; locate the last breakpoint still >= mass
    k = int(np.searchsorted(-masses, -mass, side="right")) - 1
    if k == len(bps) - 1:
        return np.clip(v - bps[k], 0.0, 1.0), float(bps[k])
    mid = 0.5 * (bps[k] + bps[k + 1])
    shifted = v - mid
    n1 = int((shifted >= 1.0).sum())
    active = (shifted > 0.0) & (shifted < 1.0)
    na = int(active.sum())
    if na == 0:
        # flat piece: any lam on it yields the same point
        lam = bps[k] if masses[k] == mass else mid
    else:
        lam = (v[active].sum() - (mass - n1)) / na
    return np.clip(v - lam, 0.0, 1.0), float(lam)


def project_capped_exact(v: np.ndarray, spec: CappedSimplexSpec) -> np.ndarray:
    """Closed-form Euclidean projection onto the capped simplex."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size != spec.dim:
        raise ValueError(f"expected a vector of length {spec.dim}")
    point, _ = _capped_pivot(v, spec.mass_value)
    return point


def project_capped_bisection(
    v: np.ndarray, spec: CappedSimplexSpec, iterations: int = 200
) -> np.ndarray:
    """Reference oracle: bisect the threshold until the mass budget is met.

    Deliberately naive; kept as an independent cross-check for
    ``project_capped_exact`` and for diagnostics.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size != spec.dim:
        raise ValueError(f"expected a vector of length {spec.dim}")
    mass = spec.mass_value
    lo, hi = float(v.min() - 1.0), float(v.max())
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if np.clip(v - mid, 0.0, 1.0).sum() >= mass:
            lo = mid
        else:
            hi = mid
    return np.clip(v - 0.5 * (lo + hi), 0.0, 1.0)


# ---------------------------------------------------------------------------
# soft operators


def project_simplex_soft(v: Var, mass, sharpness: float = DEFAULT_SHARPNESS) -> Var:
    """Differentiable surrogate of the simplex projection.

    Follows the sorted-pivot method but replaces its two discrete choices
    with smooth stand-ins: the positivity test of each pivot candidate goes
    through a softsign, and the argmax over candidates through a softmax of
    index-weighted scores.  ``sharpness`` scales both, and the surrogate
    approaches the exact projection as it grows.

    ``mass`` may be a float or a scalar node; in the latter case gradients
    flow into whatever produced the mass budget.
    """
    tape = v.tape
    L = len(v)
    if not isinstance(mass, Var):
        if mass <= 0:
            raise InfeasibleSpecError(f"simplex mass must be positive, got {mass}")
        mass = tape.constant(float(mass))
    mu, _ = dg.sort_desc(v)
    cssv = dg.cumsum(mu)
    idx = tape.constant(np.arange(1, L + 1, dtype=np.float64))
    margin = dg.sub(dg.mul(mu, idx), dg.sub(cssv, mass))
    sign = dg.softsign(dg.scale(margin, sharpness))
    weights = dg.softmax(dg.scale(dg.mul(sign, idx), sharpness))
    theta = dg.div(
        dg.sub(dg.dot(cssv, weights), mass), dg.dot(idx, weights)
    )
    return dg.relu(dg.sub(v, theta))


def project_capped_dykstra(
    v,
    spec: CappedSimplexSpec,
    rounds: int = DEFAULT_ROUNDS,
    sharpness: float = DEFAULT_SHARPNESS,
    mode: str = "soft",
    detach_corrections: bool = False,
) -> ProjectionResult:
    """Project onto the capped simplex by alternating two easy projections.

    Each round applies the upper-box clamp and then the scaled-simplex
    projection, with Dykstra correction terms carried between rounds so the
    alternation converges to the intersection projection rather than to an
    arbitrary feasible point.

    ``mode='exact'`` runs on plain arrays with exact sub-projections.
    ``mode='soft'`` records every step on the tape of ``v`` using the soft
    simplex surrogate; the correction terms stay on the tape as well unless
    ``detach_corrections`` severs them from the graph.
    """
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    if mode == "exact":
        return _dykstra_exact(np.asarray(v, dtype=np.float64), spec, rounds)
    if mode == "soft":
        if not isinstance(v, Var):
            raise TypeError("soft mode projects a tape node")
        return _dykstra_soft(v, spec, rounds, sharpness, detach_corrections)
    raise ValueError(f"unknown mode {mode!r}")


def _dykstra_exact(v: np.ndarray, spec: CappedSimplexSpec, rounds: int):
    if v.ndim != 1 or v.size != spec.dim:
        raise ValueError(f"expected a vector of length {spec.dim}")
    mass = spec.mass_value
    if mass == 0.0:
        y = np.zeros_like(v)
        rs, rb = _residuals(y, mass)
        return ProjectionResult(y, rs, rb, 0)
    y, p, q = v.copy(), np.zeros_like(v), np.zeros_like(v)
    for _ in range(rounds):
        t = project_box_upper(y + p)
        p = y + p - t
        y2 = project_simplex_exact(t + q, mass)
        q = t + q - y2
        y = y2
    rs, rb = _residuals(y, mass)
    return ProjectionResult(y, rs, rb, rounds)


def _dykstra_soft(v: Var, spec, rounds, sharpness, detach_corrections):
    tape = v.tape
    mass = spec.mass
    mass_value = mass.value if isinstance(mass, Var) else mass
    if mass_value <= 0.0:
        # degenerate budget: the only feasible point is the origin
        y = dg.scale(v, 0.0)
        return ProjectionResult(y, 0.0, 0.0, 0)
    y = v
    p = tape.constant(np.zeros(len(v)))
    q = tape.constant(np.zeros(len(v)))
    for _ in range(rounds):
        yp = dg.add(y, p)
        t = project_box_upper(yp)
        p = dg.sub(yp, t)
        tq = dg.add(t, q)
        y = project_simplex_soft(tq, mass, sharpness)
        q = dg.sub(tq, y)
        if detach_corrections:
            p = tape.constant(p.value)
            q = tape.constant(q.value)
    rs, rb = _residuals(y.value, float(mass_value))
    return ProjectionResult(y, rs, rb, rounds)


def project_capped_fast_soft(
    v: Var,
    spec: CappedSimplexSpec,
    iterations: int = 30,
    sharpness: float = DEFAULT_SHARPNESS,
) -> Var:
    """Differentiable one-shot projection onto the capped simplex.

    Bisects the clamp threshold directly.  At each trial threshold the two
    active-set boundaries (last coordinate clamped at one, last coordinate
    above zero) are located by softmax-weighted index scores over the
    descending sort, from which the mass at that threshold follows by dot
    products with the cumulative sums.  The interval update itself is a
    hard branch on values, as in any bisection; the returned point is the
    casewise clamp at the final threshold, kept on the tape.

    The boundary score for "clamped at one" gets a sentinel entry at
    position zero so that thresholds above max(v) - 1, where nothing is
    clamped, remain representable.
    """
    tape = v.tape
    L = len(v)
    if L != spec.dim:
        raise ValueError(f"expected a vector of length {spec.dim}")
    # the threshold search branches on values only, so a tape-node mass
    # contributes no gradient here and its numeric value suffices
    mass = spec.mass_value
    if mass == 0.0:
        return dg.scale(v, 0.0)
    if mass == float(L):
        return dg.shift(dg.scale(v, 0.0), 1.0)

    mu, _ = dg.sort_desc(v)
    cssv = dg.cumsum(mu)
    cssv0 = dg.prepend_zero(cssv)
    idx = tape.constant(np.arange(1, L + 1, dtype=np.float64))
    idx0 = tape.constant(np.arange(0, L + 1, dtype=np.float64))

    lo = dg.shift(dg.pick(mu, L - 1), -1.0)
    hi = dg.pick(mu, 0)
    lam = dg.scale(dg.add(lo, hi), 0.5)
    for _ in range(iterations):
        ones_sign = dg.softsign(dg.scale(dg.shift(dg.sub(mu, lam), -1.0), sharpness))
        pos_sign = dg.softsign(dg.scale(dg.sub(mu, lam), sharpness))
        w_ones = dg.softmax(
            dg.scale(dg.prepend_zero(dg.mul(ones_sign, idx)), sharpness)
        )
        w_pos = dg.softmax(dg.scale(dg.mul(pos_sign, idx), sharpness))
        n_ones = dg.dot(idx0, w_ones)
        n_pos = dg.dot(idx, w_pos)
        inner = dg.sub(dg.dot(cssv, w_pos), dg.dot(cssv0, w_ones))
        trial_mass = dg.add(
            dg.sub(inner, dg.mul(lam, dg.sub(n_pos, n_ones))), n_ones
        )
        if float(trial_mass.value) > mass:
            lo = lam
        else:
            hi = lam
        lam = dg.scale(dg.add(lo, hi), 0.5)
    return dg.clip01(dg.sub(v, lam))


# ---------------------------------------------------------------------------
# matrix extension


def project_matrix_rows_cols(
    y: np.ndarray, col_mass: np.ndarray, rounds: int = 100
) -> np.ndarray:
    """Dykstra alternation between row and column simplex constraints.

    Rows are projected onto the unit simplex (each row sums to one) and
    columns onto nonnegative vectors of prescribed mass ``col_mass[j]``.
    Consistency requires sum(col_mass) to equal the number of rows, since
    both constraint sets fix the total mass of the matrix.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError("expected a matrix")
    n_rows, n_cols = y.shape
    col_mass = np.asarray(col_mass, dtype=np.float64)
    if col_mass.shape != (n_cols,):
        raise ValueError(f"expected {n_cols} column masses")
    if np.any(col_mass < 0):
        raise InfeasibleSpecError("column masses must be nonnegative")
    if abs(col_mass.sum() - n_rows) > 1e-8:
        raise InfeasibleSpecError(
            f"column masses sum to {col_mass.sum()}, expected {n_rows}"
        )
    cur = y.copy()
    p = np.zeros_like(y)
    q = np.zeros_like(y)
    for _ in range(rounds):
        t = _rows_to_simplex(cur + p)
        p = cur + p - t
        cur2 = _cols_to_mass(t + q, col_mass)
        q = t + q - cur2
        cur = cur2
    return cur


def _rows_to_simplex(m: np.ndarray) -> np.ndarray:
    out = np.empty_like(m)
    for i in range(m.shape[0]):
        out[i] = project_simplex_exact(m[i], 1.0)
    return out


def _cols_to_mass(m: np.ndarray, col_mass: np.ndarray) -> np.ndarray:
    out = np.empty_like(m)
    for j in range(m.shape[1]):
        if col_mass[j] == 0.0:
            out[:, j] = 0.0
        else:
            out[:, j] = project_simplex_exact(m[:, j], col_mass[j])
    return out


def matrix_residuals(y: np.ndarray, col_mass: np.ndarray) -> tuple[float, float]:
    """Worst row-sum and column-sum violations of a candidate matrix."""
    row = float(np.abs(y.sum(axis=1) - 1.0).max())
    col = float(np.abs(y.sum(axis=0) - np.asarray(col_mass)).max())
    return row, col
