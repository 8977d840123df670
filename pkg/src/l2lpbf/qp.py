"""Condensed per-layer optimal control problem and a box-constrained QP solver.

The OCP over one layer of N intervals is

    min  sum_{i=0}^{N} Q (d_i - d_ref)^2 + R (u_i - u_{i-1})^2
    s.t. x_0 = 0, u_{-1} = u_prev
         x_{i+1} = A x_i + B u_i + c
         u_i in [u_min, u_max] where the laser is on, u_i = 0 elsewhere

with ``u_N = u_{N-1}``, so the last increment term vanishes. Depths enter
the cost in micrometres. Eliminating the states leaves a dense QP in the N
powers, ``min 0.5 u'Hu + f'u + const`` subject to ``lo <= u <= hi``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve, toeplitz

DEPTH_SCALE = 1e6  # metres -> micrometres in the cost


class QpError(RuntimeError):
    pass


class QpNonConvergence(QpError):
    def __init__(self, message, best=None, residual=None):
        super().__init__(message)
        self.best = best
        self.residual = residual


@dataclass
class OcpSpec:
    target_depth: float  # m
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    xi: np.ndarray
    u_min: float = 100.0
    u_max: float = 150.0
    q_depth: float = 1.0
    r_smooth: float = 0.05
    u_prev: float | None = None  # defaults to u_min

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float).reshape(2, 2)
        self.B = np.asarray(self.B, dtype=float).reshape(2)
        self.c = np.asarray(self.c, dtype=float).reshape(2)
        self.xi = np.asarray(self.xi, dtype=bool)
        if self.q_depth <= 0 or self.r_smooth < 0:
            raise ValueError("weights require q_depth > 0 and r_smooth >= 0")
        if self.xi.ndim != 1 or self.xi.size == 0:
            raise ValueError("xi must be a non-empty 1-D mask")
        if self.u_max < self.u_min:
            raise ValueError("u_max must be >= u_min")

    @property
    def n(self) -> int:
        return self.xi.size

    @property
    def anchor(self) -> float:
        return self.u_min if self.u_prev is None else self.u_prev


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    const: float = 0.0

    def __post_init__(self):
        if np.any(self.lo > self.hi):
            raise QpError("lower bound exceeds upper bound")

    def objective(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ self.H @ u + self.f @ u + self.const)

    def gradient(self, u) -> np.ndarray:
        return self.H @ u + self.f


@dataclass
class QpSolution:
    u: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    lower: tuple = ()
    upper: tuple = ()
    history: list = field(default_factory=list)

    @property
    def active_set(self) -> tuple:
        return tuple(sorted(self.lower + self.upper))


def depth_response(A, B, c, n):
    """Depth after each interval as an affine map of the powers.

    Returns ``(G, h)`` in metres with ``depth[k] = G[k] @ u + h[k]`` for the
    state after interval k.
    """
    A = np.asarray(A, dtype=float)
    markov = np.empty(n)
    drift = np.empty(n)
    row = np.array([1.0, 0.0])
    for s in range(n):
        markov[s] = row @ B
        drift[s] = row @ c
        row = row @ A
    # lower-triangular Toeplitz: G[k, j] = markov[k - j]
    G = toeplitz(markov, np.zeros(n))
    return G, np.cumsum(drift)


def condense(spec: OcpSpec) -> QpProblem:
    n = spec.n
    G, h = depth_response(spec.A, spec.B, spec.c, n)
    G *= DEPTH_SCALE
    offset = h * DEPTH_SCALE - spec.target_depth * DEPTH_SCALE
    e = np.zeros(n)
    e[0] = spec.anchor
    q, r = spec.q_depth, spec.r_smooth
    # D is the first-difference operator (u_i - u_{i-1}); D'D is tridiagonal
    # and D'e only touches the first entry
    DtD = 2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
    DtD[-1, -1] = 1.0
    Dte = np.zeros(n)
    Dte[0] = e[0]
    H = 2.0 * (q * G.T @ G + r * DtD)
    f = 2.0 * (q * G.T @ offset - r * Dte)
    target = spec.target_depth * DEPTH_SCALE
    const = q * (offset @ offset) + r * (e @ e) + q * target**2
    H = 0.5 * (H + H.T)
    # keeps H strictly convex when the model has no depth gain and R = 0
    H[np.diag_indices(n)] += 1e-8 * max(np.trace(H) / n, 1.0)
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise QpError("condensed Hessian is not positive definite") from None
    lo = np.where(spec.xi, spec.u_min, 0.0)
    hi = np.where(spec.xi, spec.u_max, 0.0)
    return QpProblem(H, f, lo, hi, float(const))


def ocp_cost(spec: OcpSpec, u) -> float:
    """Direct rollout of the OCP cost for a power sequence (no condensing)."""
    x = np.zeros(2)
    target = spec.target_depth * DEPTH_SCALE
    total = spec.q_depth * target**2  # i = 0, no melt pool yet
    prev = spec.anchor
    for ui in u:
        total += spec.r_smooth * (ui - prev) ** 2
        x = spec.A @ x + spec.B * ui + spec.c
        total += spec.q_depth * (x[0] * DEPTH_SCALE - target) ** 2
        prev = ui
    return float(total)


def solve_box_qp(qp: QpProblem, tol: float = 1e-9, max_changes: int | None = None,
                 keep_history: bool = False) -> QpSolution:
    """Primal active-set method for ``min 0.5 u'Hu + f'u`` on a box.

    Starts from the clipped unconstrained minimizer. Each iteration takes the
    Newton step on the free variables, stops at the first blocking bound, and
    releases the bound with the most negative multiplier once the free
    subspace is optimal. Variables with ``lo == hi`` stay pinned.
    """
    H, f, lo, hi = qp.H, qp.f, qp.lo, qp.hi
    n = f.size
    max_changes = 10 * n if max_changes is None else max_changes
    pinned = lo == hi

    u = np.clip(solve(H, -f, assume_a="pos"), lo, hi)
    at_lo = (u <= lo) & ~pinned
    at_hi = (u >= hi) & ~pinned
    u[pinned] = lo[pinned]
    history = [qp.objective(u)] if keep_history else []

    changes = 0
    iterations = 0
    max_iterations = 2 * max_changes + 100
    while True:
        iterations += 1
        free = ~(pinned | at_lo | at_hi)
        g = H @ u + f
        p = np.zeros(n)
        if free.any():
            p[free] = solve(H[np.ix_(free, free)], -g[free], assume_a="pos")
        if np.max(np.abs(p)) <= 1e-12 * max(1.0, np.max(np.abs(u))):
            u[free] += p[free]
            g = H @ u + f
            mult = np.where(at_lo, g, np.where(at_hi, -g, np.inf))
            j = int(np.argmin(mult))
            if mult[j] >= -tol:
                break
            at_lo[j] = at_hi[j] = False
            changes += 1
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(free & (p < 0), (lo - u) / p,
                                 np.where(free & (p > 0), (hi - u) / p, np.inf))
            j = int(np.argmin(ratio))
            if ratio[j] < 1.0:
                u = u + max(ratio[j], 0.0) * p
                if p[j] < 0:
                    u[j] = lo[j]
                    at_lo[j] = True
                else:
                    u[j] = hi[j]
                    at_hi[j] = True
                changes += 1
            else:
                u = u + p
        if keep_history:
            history.append(qp.objective(u))
        if changes > max_changes or iterations > max_iterations:
            raise QpNonConvergence(
                f"no convergence after {changes} active-set changes, {iterations} iterations",
                best=u.copy(), residual=kkt_residual(qp, u, tol))

    u = np.clip(u, lo, hi)
    residual = kkt_residual(qp, u, tol)
    if keep_history:
        history.append(qp.objective(u))
    return QpSolution(u=u, objective=qp.objective(u), kkt_residual=residual,
                      iterations=iterations, lower=tuple(np.nonzero(at_lo)[0].tolist()),
                      upper=tuple(np.nonzero(at_hi)[0].tolist()), history=history)


def kkt_residual(qp: QpProblem, u, tol: float = 1e-9) -> float:
    return verify_kkt(qp, u, tol).residual


@dataclass
class KktReport:
    ok: bool
    residual: float
    stationarity: float
    feasibility: float
    per_variable: np.ndarray


def verify_kkt(qp: QpProblem, u, tol: float = 1e-9) -> KktReport:
    """Recompute first-order optimality for a box QP from scratch.

    A variable within ``tol`` of a bound counts as active there. Active
    variables need a gradient of the right sign, interior ones a zero
    gradient; pinned variables only need feasibility.
    """
    u = np.asarray(u, dtype=float)
    g = qp.H @ u + qp.f
    infeasible = np.maximum(qp.lo - u, 0.0) + np.maximum(u - qp.hi, 0.0)
    pinned = qp.lo == qp.hi
    lower = (u - qp.lo) <= tol
    upper = (qp.hi - u) <= tol
    viol = np.where(lower, np.maximum(-g, 0.0),
                    np.where(upper, np.maximum(g, 0.0), np.abs(g)))
    viol = np.where(pinned, 0.0, viol)
    stat = float(viol.max()) if viol.size else 0.0
    feas = float(infeasible.max()) if infeasible.size else 0.0
    residual = max(stat, feas)
    return KktReport(ok=residual <= tol, residual=residual, stationarity=stat,
                     feasibility=feas, per_variable=viol)


def solve_ocp(spec: OcpSpec, tol: float = 1e-9) -> tuple[QpSolution, float]:
    """Condense and solve; returns the solution and wall time in seconds."""
    t0 = time.perf_counter()
    qp = condense(spec)
    sol = solve_box_qp(qp, tol)
    return sol, time.perf_counter() - t0


def benchmark(A, B, c, sizes=(10, 20, 40, 80, 160, 320), repeats: int = 21,
              target_depth: float = 30e-6) -> dict:
    """Median build+solve wall time per horizon length, laser on throughout.

    Returns the medians, the least-squares log-log exponent over all sizes and
    the local exponent between consecutive sizes. Dense condensing costs
    O(N^3) once N is large, so the local exponent rises toward 3 at the top
    of the range even when the fitted exponent stays near 1.
    """
    sizes = [int(n) for n in sizes]
    medians = []
    for n in sizes:
        spec = OcpSpec(target_depth, A, B, c, np.ones(n, dtype=bool))
        solve_ocp(spec)  # warm-up
        medians.append(float(np.median([solve_ocp(spec)[1] for _ in range(repeats)])))
    logn, logt = np.log(sizes), np.log(medians)
    exponent = float(np.polyfit(logn, logt, 1)[0]) if len(sizes) > 1 else float("nan")
    local = [float(v) for v in np.diff(logt) / np.diff(logn)]
    return {"sizes": sizes, "median_s": medians, "repeats": repeats,
            "fitted_exponent": exponent, "local_exponents": local}
