"""Economic dispatch as a convex QP, solved to optimality with exact duals.

The hourly problem is

    min   sum_i c2_i g_i^2 + c1_i g_i
    s.t.  sum_i g_i = sum_n d_n          (dual: lambda, the energy price)
          g_min <= g <= g_max
          |flow_k(g)| <= limit_k         (duals: z+, z- per monitored line)

with flow_k = PTDF_k . (injection). The balance row is written as
-sum(g) = -sum(d) so the raw equality dual *is* lambda (marginal system cost
of one more MW of load). The per-line price component is mu_k = z-_k - z+_k,
giving the nodal price identity lmp_i = lambda + sum_k ptdf[k,i] mu_k.

Solved with a Mehrotra predictor-corrector interior-point method. Duals are
the point of the exercise, so every returned optimum is re-verified against
the KKT conditions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridGraph, PtdfMatrix, ptdf as build_ptdf

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_MAX_ITER = "max_iter"

# interior-point termination and the post-solve certificate tolerance
_MU_TOL = 1e-8
_RES_TOL = 1e-8
_MAX_ITER = 200
KKT_TOL = 1e-6
CONGESTION_DUAL_TOL = 1e-6


class SolverError(RuntimeError):
    """Dispatch failed in a way the caller asked to be fatal."""


@dataclass(frozen=True)
class BidCurve:
    c2: np.ndarray  # $/MWh^2 per generator, strictly positive
    c1: np.ndarray  # $/MWh per generator, nonnegative


@dataclass(frozen=True)
class LineLimits:
    """Monitored subset of lines; indices into GridGraph.edges."""
    line_indices: tuple[int, ...]
    limits_mw: np.ndarray

    def __post_init__(self):
        if len(self.line_indices) != len(self.limits_mw):
            raise ValueError("line_indices and limits_mw length mismatch")

    @property
    def count(self) -> int:
        return len(self.line_indices)


EMPTY_LIMITS = LineLimits((), np.zeros(0))


@dataclass(frozen=True)
class DispatchRecord:
    hour: int
    generation: np.ndarray          # MW per generator
    lam: float                      # $/MWh energy component
    mu: np.ndarray                  # $/MWh signed dual per monitored line
    s: int                          # 1 iff any line constraint binds
    lmp: np.ndarray                 # $/MWh per node
    solver_status: str
    diagnostics: str = field(default="", compare=False)


@dataclass
class _QP:
    """min 1/2 x'Qx + c'x  s.t.  a.x = b,  G x <= h (Q diagonal PD)."""
    qdiag: np.ndarray
    c: np.ndarray
    a: np.ndarray
    b: float
    g_mat: np.ndarray
    h: np.ndarray


def _solve_qp(qp: _QP, x0: np.ndarray | None = None
              ) -> tuple[np.ndarray, float, np.ndarray, str, str]:
    """Returns (x, y, z, status, diagnostics)."""
    n = qp.c.size
    m = qp.h.size
    g_mat, h, a = qp.g_mat, qp.h, qp.a

    x = np.zeros(n) if x0 is None else x0.astype(np.float64).copy()
    slack0 = h - g_mat @ x
    w = np.maximum(slack0, 1.0)
    z = np.full(m, max(1.0, np.abs(qp.c).max(initial=0.0) / 10.0))
    y = 0.0

    scale_d = 1.0 + np.abs(qp.c).max(initial=0.0)
    scale_p = 1.0 + abs(qp.b) + np.abs(h).max(initial=0.0)

    status = STATUS_MAX_ITER
    diag = ""
    best_mu = np.inf
    stalled = 0
    for _ in range(_MAX_ITER):
        r_d = qp.qdiag * x + qp.c + a * y + g_mat.T @ z
        r_p = float(a @ x - qp.b)
        r_g = g_mat @ x + w - h
        mu = float(w @ z) / m

        if (mu <= _MU_TOL and abs(r_p) <= _RES_TOL * scale_p
                and np.abs(r_d).max() <= _RES_TOL * scale_d
                and np.abs(r_g).max() <= _RES_TOL * scale_p):
            status = STATUS_OPTIMAL
            break
        if not np.isfinite(mu) or np.abs(z).max() > 1e13 or np.abs(x).max() > 1e13:
            return x, y, z, STATUS_INFEASIBLE, _violation_report(g_mat, h, x, z)
        # Mehrotra steps occasionally stop making progress from a bad corner;
        # recenter the complementarity pairs and continue
        if mu < best_mu * 0.9:
            best_mu = mu
            stalled = 0
        else:
            stalled += 1
            if stalled >= 8:
                bump = np.sqrt(mu) if mu > 0 else 1e-4
                w = w + bump
                z = z + bump
                stalled = 0

        zw = z / w
        m_mat = np.diag(qp.qdiag) + (g_mat.T * zw) @ g_mat
        kkt = np.empty((n + 1, n + 1))
        kkt[:n, :n] = m_mat
        kkt[:n, n] = a
        kkt[n, :n] = a
        kkt[n, n] = 0.0

        def newton(r_c):
            rhs = np.empty(n + 1)
            rhs[:n] = -r_d - g_mat.T @ ((-r_c + z * r_g) / w)
            rhs[n] = -r_p
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                return None
            dx, dy = sol[:n], float(sol[n])
            dw = -r_g - g_mat @ dx
            dz = (-r_c - z * dw) / w
            return dx, dy, dw, dz

        step = newton(w * z)
        if step is None:
            return x, y, z, STATUS_INFEASIBLE, "singular interior-point system"
        dx_a, dy_a, dw_a, dz_a = step

        alpha_p_aff = _max_step(w, dw_a)
        alpha_d_aff = _max_step(z, dz_a)
        mu_aff = float((w + alpha_p_aff * dw_a) @ (z + alpha_d_aff * dz_a)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        step = newton(w * z + dw_a * dz_a - sigma * mu)
        if step is None:
            return x, y, z, STATUS_INFEASIBLE, "singular interior-point system"
        dx, dy, dw, dz = step

        alpha_p = min(1.0, 0.995 * _max_step(w, dw))
        alpha_d = min(1.0, 0.995 * _max_step(z, dz))
        x = x + alpha_p * dx
        w = w + alpha_p * dw
        y = y + alpha_d * dy
        z = z + alpha_d * dz
    else:
        diag = (f"iteration cap {_MAX_ITER}: mu={mu:.3e} "
                f"r_p={abs(r_p):.3e} r_d={np.abs(r_d).max():.3e}")
    return x, y, z, status, diag


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    """Largest alpha <= 1/0 keeping v + alpha*dv >= 0."""
    neg = dv < 0
    if not neg.any():
        return 1.0
    return float(min(1.0, (-v[neg] / dv[neg]).min()))


def _violation_report(g_mat, h, x, z, top: int = 3) -> str:
    resid = g_mat @ x - h
    order = np.argsort(-resid)[:top]
    parts = [f"row {int(i)}: violation {resid[i]:.4g}, dual {z[i]:.4g}" for i in order]
    return "most violated inequality rows: " + "; ".join(parts)


def solve_dcopf(graph: GridGraph, loads: np.ndarray, bids: BidCurve,
                limits: LineLimits = EMPTY_LIMITS,
                ptdf_matrix: PtdfMatrix | None = None,
                hour: int = 0) -> DispatchRecord:
    """Solve one hour of economic dispatch and decompose the duals.

    ``loads`` is the full N-vector of nodal demand in MW. Only lines named in
    ``limits`` are constrained (and priced); everything else is copper plate.
    """
    loads = np.asarray(loads, dtype=np.float64)
    if loads.shape != (graph.node_count,):
        raise ValueError(f"loads shape {loads.shape}, expected ({graph.node_count},)")
    n = len(graph.generators)
    g_min = np.array([g.g_min for g in graph.generators])
    g_max = np.array([g.g_max for g in graph.generators])
    c2 = np.asarray(bids.c2, dtype=np.float64)
    c1 = np.asarray(bids.c1, dtype=np.float64)
    if c2.shape != (n,) or c1.shape != (n,):
        raise ValueError(f"bid arrays must have shape ({n},)")
    if np.any(c2 <= 0):
        raise ValueError("c2 must be strictly positive for a unique dispatch")
    total = float(loads.sum())

    if total < g_min.sum() - 1e-9 or total > g_max.sum() + 1e-9:
        return DispatchRecord(
            hour, np.zeros(n), 0.0, np.zeros(limits.count), 0,
            np.zeros(graph.node_count), STATUS_INFEASIBLE,
            f"total load {total:.4g} MW outside dispatchable range "
            f"[{g_min.sum():.4g}, {g_max.sum():.4g}] MW")

    if total == 0.0 and np.all(g_min == 0.0):
        # every unit pinned at its lower bound: no strict interior, but the
        # KKT system is solvable by inspection; price the next MW
        lam = float(c1.min())
        return DispatchRecord(
            hour, np.zeros(n), lam, np.zeros(limits.count), 0,
            np.full(graph.node_count, lam), STATUS_OPTIMAL)

    if ptdf_matrix is None:
        ptdf_matrix = build_ptdf(graph)
    gen_nodes = [g.node for g in graph.generators]
    m = limits.count
    if m:
        f_mon = ptdf_matrix.values[list(limits.line_indices), :]
        fc = f_mon[:, gen_nodes]
        fd = f_mon @ loads
        lims = np.asarray(limits.limits_mw, dtype=np.float64)
        g_mat = np.vstack([np.eye(n), -np.eye(n), fc, -fc])
        h = np.concatenate([g_max, -g_min, lims + fd, lims - fd])
    else:
        f_mon = np.zeros((0, graph.node_count))
        g_mat = np.vstack([np.eye(n), -np.eye(n)])
        h = np.concatenate([g_max, -g_min])

    qp = _QP(qdiag=2.0 * c2, c=c1.copy(), a=-np.ones(n), b=-total, g_mat=g_mat, h=h)
    # start strictly inside the box, proportionally loaded toward balance
    span = g_max - g_min
    cap = span.sum()
    tau = (total - g_min.sum()) / cap if cap > 0 else 0.0
    x0 = g_min + span * min(max(tau, 1e-3), 1.0 - 1e-3)
    x, y, z, status, diag = _solve_qp(qp, x0)

    if status != STATUS_OPTIMAL:
        return DispatchRecord(hour, x, 0.0, np.zeros(m), 0,
                              np.zeros(graph.node_count), status, diag)

    lam = float(y)
    if m:
        z_plus = z[2 * n:2 * n + m]
        z_minus = z[2 * n + m:]
        mu = z_minus - z_plus
    else:
        mu = np.zeros(0)
    lmp = lam + (f_mon.T @ mu if m else np.zeros(graph.node_count))
    s = int(np.abs(mu).max(initial=0.0) > CONGESTION_DUAL_TOL)

    kkt_err = kkt_residuals(qp, x, y, z)
    worst = max(kkt_err.values())
    if worst > KKT_TOL:
        detail = ", ".join(f"{k}={v:.3e}" for k, v in kkt_err.items())
        return DispatchRecord(hour, x, lam, mu, s, lmp, STATUS_MAX_ITER,
                              f"KKT certificate failed: {detail}")
    return DispatchRecord(hour, x, lam, mu, s, lmp, STATUS_OPTIMAL)


def kkt_residuals(qp: _QP, x: np.ndarray, y: float, z: np.ndarray) -> dict[str, float]:
    """Scaled residuals of the four KKT blocks at a candidate optimum."""
    scale_c = 1.0 + np.abs(qp.c).max(initial=0.0)
    scale_b = 1.0 + abs(qp.b)
    slack = qp.h - qp.g_mat @ x
    return {
        "stationarity": float(np.abs(qp.qdiag * x + qp.c + qp.a * y + qp.g_mat.T @ z).max()
                              / scale_c),
        "primal_eq": abs(float(qp.a @ x - qp.b)) / scale_b,
        "primal_ineq": float(np.maximum(-slack, 0.0).max(initial=0.0) / scale_b),
        "dual_nonneg": float(np.maximum(-z, 0.0).max(initial=0.0)),
        "complementarity": float(np.abs(z * slack).max(initial=0.0)
                                 / (scale_b * scale_c)),
    }


def line_flows(graph: GridGraph, ptdf_matrix: PtdfMatrix,
               generation: np.ndarray, loads: np.ndarray) -> np.ndarray:
    """MW flow on every line for a given dispatch (positive from->to)."""
    injection = -np.asarray(loads, dtype=np.float64).copy()
    for g, p in zip(graph.generators, np.asarray(generation, dtype=np.float64)):
        injection[g.node] += p
    return ptdf_matrix.values @ injection
