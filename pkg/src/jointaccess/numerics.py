"""Dense numerical kernels: strict LP feasibility and least squares.

The LP solver is a two-phase tableau simplex; Bland's rule guards degenerate
stretches against cycling, and a tiny right-hand-side perturbation keeps the
homogeneous feasibility LPs away from their fully degenerate start vertex.
It is tuned for the small, dense, highly degenerate systems produced by the
accessibility tests (a few hundred rows, tens of columns).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TOLERANCE = 1e-9
PIVOT_EPS = 1e-12
# Smallest column entry accepted as a pivot element.
PIVOT_TOL = 1e-9
# The tableau is rebuilt from the original rows this often to shed rounding drift.
REFACTOR_EVERY = 64
MAX_PIVOTS = 20_000
# Above this many rows lp_strict_feasible switches to row generation.
DIRECT_ROW_LIMIT = 64
ROW_BATCH = 32
BLAND_AFTER = 50
# Row i of a feasibility LP is relaxed by PERTURBATION * (1 + frac(i * phi)).
PERTURBATION = 1e-7
_PHI = 0.6180339887498949


class NumericsError(ValueError):
    """Raised on invalid numerical input (non-finite entries, bad shapes)."""


class SolverError(RuntimeError):
    """The simplex hit its pivot cap. Never an infeasibility verdict."""


@dataclass(frozen=True)
class FeasibilityResult:
    feasible: bool
    witness: np.ndarray | None
    margin: float


def as_dense(a, name="matrix", ndim=2) -> np.ndarray:
    """Validate and convert to a finite float64 array of the given rank."""
    arr = np.asarray(a, dtype=np.float64)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != ndim:
        raise NumericsError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise NumericsError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} contains non-finite entries")
    return arr


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    factors = T[:, col].copy()
    factors[row] = 0.0
    T -= np.outer(factors, T[row])


def _refactor(T: np.ndarray, basis: np.ndarray, base_rows: np.ndarray, base_obj: np.ndarray) -> None:
    """Recompute the tableau for ``basis`` directly from the original rows."""
    m = T.shape[0] - 1
    try:
        body = np.linalg.solve(base_rows[:, basis], base_rows)
    except np.linalg.LinAlgError:
        return
    if not np.all(np.isfinite(body)):
        return
    body[:, basis] = np.eye(m)
    rhs = body[:, -1]
    rhs[(rhs < 0) & (rhs > -PIVOT_TOL)] = 0.0
    T[:m] = body
    T[-1] = base_obj - base_obj[basis] @ body


def _run_simplex(T: np.ndarray, basis: np.ndarray, ncols: int, max_pivots: int,
                 base=None) -> str:
    """Maximize the objective held in the last row of ``T`` (stored as -c).

    Pricing is Dantzig's most-negative reduced cost. After ``BLAND_AFTER``
    consecutive pivots that fail to raise the objective (beyond rounding) it
    switches to Bland's smallest-index rule for the rest of the solve, which
    rules out cycling. Only the first ``ncols`` columns may enter. With
    ``base = (rows, objective)`` holding the unpivoted tableau, the tableau
    is periodically rebuilt from it. Returns "optimal" or "unbounded";
    raises SolverError at the pivot cap.
    """
    m = T.shape[0] - 1
    stalled = 0
    bland = False
    for count in range(max_pivots):
        if base is not None and count and (count % REFACTOR_EVERY == 0
                                           or T[:m, -1].min() < -PIVOT_TOL):
            _refactor(T, basis, *base)
        reduced = T[-1, :ncols]
        bland = bland or stalled >= BLAND_AFTER
        if bland:
            candidates = np.flatnonzero(reduced < -PIVOT_EPS)
            if candidates.size == 0:
                return "optimal"
            col = int(candidates[0])
        else:
            col = int(np.argmin(reduced))
            if reduced[col] >= -PIVOT_EPS:
                return "optimal"
        column = T[:m, col]
        positive = column > PIVOT_TOL
        if not positive.any():
            return "unbounded"
        ratios = np.full(m, np.inf)
        ratios[positive] = T[:m, -1][positive] / column[positive]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + PIVOT_EPS * max(1.0, abs(best)))
        if bland:
            row = int(ties[np.argmin(basis[ties])])
        else:
            row = int(ties[np.argmax(column[ties])])
        before = T[-1, -1]
        _pivot(T, row, col)
        basis[row] = col
        progress = T[-1, -1] - before
        stalled = stalled + 1 if progress <= PIVOT_EPS * max(1.0, abs(before)) else 0
    raise SolverError(f"simplex did not converge within {max_pivots} pivots")


def simplex_max(c, A_ub, b_ub, max_pivots: int = MAX_PIVOTS):
    """Solve ``max c.x  s.t.  A_ub x <= b_ub, x >= 0``.

    Returns ``(status, x, value)`` with status one of "optimal",
    "infeasible", "unbounded". Phase one runs only when some ``b_ub`` entry
    is negative.
    """
    c = as_dense(c, "c", ndim=1)
    A = as_dense(A_ub, "A_ub")
    b = as_dense(b_ub, "b_ub", ndim=1)
    m, n = A.shape
    if c.shape[0] != n or b.shape[0] != m:
        raise NumericsError("inconsistent LP dimensions")

    flip = b < 0
    n_art = int(flip.sum())
    # columns: structural | slack | artificial | rhs
    width = n + m + n_art + 1
    T = np.zeros((m + 1, width))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[:m][flip] *= -1.0
    basis = np.arange(n, n + m)
    art_rows = np.flatnonzero(flip)
    for k, r in enumerate(art_rows):
        T[r, n + m + k] = 1.0
        basis[r] = n + m + k

    if n_art:
        # maximize -(sum of artificials)
        T[-1, n + m:n + m + n_art] = 1.0
        phase1_obj = T[-1].copy()
        original = T[:m].copy()
        for r in art_rows:
            T[-1] -= T[r]
        _run_simplex(T, basis, n + m + n_art, max_pivots, (original, phase1_obj))
        if T[-1, -1] < -1e-9 * max(1.0, np.abs(b).max()):
            return "infeasible", None, float("nan")
        # drive remaining artificials out of the basis
        for r in range(m):
            if basis[r] >= n + m:
                nz = np.flatnonzero(np.abs(T[r, :n + m]) > PIVOT_EPS)
                if nz.size:
                    _pivot(T, r, int(nz[0]))
                    basis[r] = int(nz[0])
        T[:, n + m:n + m + n_art] = 0.0

    original = np.zeros((m, width))
    original[:, :n] = A
    original[:, n:n + m] = np.eye(m)
    original[:, -1] = b
    original[flip] *= -1.0
    T[-1, :] = 0.0
    T[-1, :n] = -c
    phase2_obj = T[-1].copy()
    for r in range(m):
        j = basis[r]
        if j < n + m and T[-1, j] != 0.0:
            T[-1] -= T[-1, j] * T[r]
    status = _run_simplex(T, basis, n + m, max_pivots, (original, phase2_obj))
    if status == "unbounded":
        return status, None, float("inf")
    x = np.zeros(n + m + n_art)
    x[basis] = T[:m, -1]
    return "optimal", x[:n], float(T[-1, -1])


def _max_margin(A: np.ndarray, max_pivots: int, relax=None) -> tuple[np.ndarray, float]:
    """max delta s.t. A u >= delta - relax, |u_i| <= 1, delta >= 0 (u split as u+ - u-)."""
    m, d = A.shape
    # variables: u+ (d), u- (d), delta
    rows = np.zeros((m + 2 * d, 2 * d + 1))
    rows[:m, :d] = -A
    rows[:m, d:2 * d] = A
    rows[:m, -1] = 1.0
    rows[m:m + d, :d] = np.eye(d)
    rows[m + d:, d:2 * d] = np.eye(d)
    rhs = np.concatenate([np.zeros(m) if relax is None else relax, np.ones(2 * d)])
    c = np.zeros(2 * d + 1)
    c[-1] = 1.0
    status, x, value = simplex_max(c, rows, rhs, max_pivots)
    if status != "optimal":  # pragma: no cover - bounded and origin-feasible by construction
        raise SolverError(f"margin LP returned {status}")
    return x[:d] - x[d:2 * d], value


def _row_generation(A: np.ndarray, tolerance: float, max_pivots: int, relax):
    """Returns a FeasibilityResult, or None when a relaxed solve is inconclusive."""
    m = A.shape[0]
    if m <= DIRECT_ROW_LIMIT:
        active = np.arange(m)
    else:
        norms = np.linalg.norm(A, axis=1)
        guess = (A / np.where(norms > 0, norms, 1.0)[:, None]).sum(axis=0)
        slack = A @ guess / np.where(norms > 0, norms, 1.0)
        active = np.sort(np.argsort(slack, kind="stable")[:DIRECT_ROW_LIMIT])

    while True:
        u, delta = _max_margin(A[active], max_pivots, None if relax is None else relax[active])
        if delta <= tolerance:
            return FeasibilityResult(False, None, delta)
        values = A @ u
        margin = float(values.min())
        if margin > tolerance:
            return FeasibilityResult(True, u, margin)
        in_active = np.zeros(m, dtype=bool)
        in_active[active] = True
        violated = np.flatnonzero((values <= tolerance) & ~in_active)
        if violated.size == 0:
            # only reachable under relaxation: optimum within the perturbation band
            return None
        worst = violated[np.argsort(values[violated], kind="stable")[:ROW_BATCH]]
        active = np.sort(np.concatenate([active, worst]))


def lp_strict_feasible(A, tolerance: float = DEFAULT_TOLERANCE,
                       max_pivots: int = MAX_PIVOTS) -> FeasibilityResult:
    """Decide whether some ``u`` satisfies ``A u > 0`` componentwise.

    Solves ``max delta s.t. A u >= delta, -1 <= u <= 1`` and declares the
    system feasible iff the optimum exceeds ``tolerance``. Tall systems are
    solved by row generation: a restricted LP is solved, and rows its
    witness violates are added until either the restricted optimum drops to
    the tolerance (infeasible, since it is a relaxation) or the witness
    clears every row.

    Every row is first relaxed by a distinct amount below ``2 * PERTURBATION``
    to break degeneracy. Verdicts stay exact: a witness is always checked
    against the unrelaxed rows, and the relaxed optimum bounds the true one
    from above. The rare optimum inside the perturbation band is re-solved
    without relaxation.

    The returned margin is ``min(A @ witness)`` for the returned witness.
    """
    A = as_dense(A, "A")
    if not 0.0 < tolerance <= 1e-3:
        raise NumericsError(f"tolerance must lie in (0, 1e-3], got {tolerance}")
    relax = PERTURBATION * (1.0 + np.modf(np.arange(A.shape[0]) * _PHI)[0])
    result = _row_generation(A, tolerance, max_pivots, relax)
    if result is None:
        result = _row_generation(A, tolerance, max_pivots, None)
    return result


def least_squares(A, b, ridge: float = 0.0) -> np.ndarray:
    """Return ``argmin_u ||A u - b||^2 + ridge ||u||^2``.

    ``b`` may be a vector or a matrix of right-hand sides (one per column).
    With ``ridge == 0`` the minimum-norm solution is returned, so
    rank-deficient ``A`` is handled without error.
    """
    A = as_dense(A, "A")
    b = np.asarray(b, dtype=np.float64)
    if b.ndim not in (1, 2) or b.shape[0] != A.shape[0]:
        raise NumericsError(f"b has shape {b.shape}, expected leading dimension {A.shape[0]}")
    if not np.all(np.isfinite(b)):
        raise NumericsError("b contains non-finite entries")
    if ridge < 0:
        raise NumericsError("ridge must be nonnegative")
    if ridge == 0.0:
        return np.linalg.lstsq(A, b, rcond=None)[0]
    d = A.shape[1]
    gram = A.T @ A + ridge * np.eye(d)
    rhs = A.T @ b
    chol = np.linalg.cholesky(gram)
    return np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
