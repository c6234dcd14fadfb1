"""Reference steady-state hydraulic solver.

A global-gradient (Todini-Pilati) Newton method: link flows and free junction
heads are solved together, with the flow corrections eliminated so each
iteration is one sparse linear solve in the heads. Active PRVs pin their
receiving node's head; the mass balance rows of the receiving node and the
PRV's start node are merged so the unknown PRV flow drops out.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .network import HW_EXPONENT, HydraulicProblem, HydraulicState, NetworkModel, Scenario

log = logging.getLogger(__name__)

OPEN_PRV_RESISTANCE = 1e-6  # linear head loss (m per m^3/s) of a fully open PRV


class SolverError(RuntimeError):
    pass


class DivergenceError(SolverError):
    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (last residual {residual:.3e})")


class InfeasibleError(SolverError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-8
    max_iterations: int = 200
    regularization: float = 1e-10  # flow magnitude floor used in the Jacobian

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class SolveInfo:
    iterations: int = 0
    prv_open: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _headloss(q, kind, r, pump, exponent):
    """Head drop from link start to end and its derivative wrt flow."""
    F = np.empty_like(q)
    dF = np.empty_like(q)
    pipe = kind == 0
    aq = np.abs(q[pipe])
    F[pipe] = r * q[pipe] * aq ** (exponent - 1.0)
    dF[pipe] = exponent * r * aq ** (exponent - 1.0)
    pm = kind == 1
    if pm.any():
        w, s, c, n = pump
        qp = q[pm]
        a = np.abs(qp)
        F[pm] = -(w**2) * s + c * w ** (2.0 - n) * np.sign(qp) * a**n
        dF[pm] = n * c * w ** (2.0 - n) * a ** (n - 1.0)
    op = kind == 2
    F[op] = OPEN_PRV_RESISTANCE * q[op]
    dF[op] = OPEN_PRV_RESISTANCE
    return F, dF


def _solve_statuses(net: NetworkModel, prob: HydraulicProblem, active: np.ndarray,
                    cfg: SolverConfig, q_init: np.ndarray | None, info: SolveInfo):
    N = net.n_nodes
    prv_links = set(net.prv_idx[active].tolist())

    flow_links = np.array([k for k in range(net.n_links) if k not in prv_links], dtype=np.int64)
    kind = np.zeros(net.n_links, dtype=np.int8)
    kind[net.pump_idx] = 1
    kind[net.prv_idx] = 2
    kind = kind[flow_links]

    fixed = net.reservoir_mask.copy()
    h = np.full(N, np.nan)
    h[net.reservoir_idx] = prob.heads[net.reservoir_idx]
    act_to = net.prv_to[active]
    act_from = net.prv_from[active]
    fixed[act_to] = True
    h[act_to] = prob.prv_setting[active]
    free = np.flatnonzero(~fixed)
    free_pos = np.full(N, -1, dtype=np.int64)
    free_pos[free] = np.arange(len(free))

    # mass rows: active PRV receivers fold into their start node's row
    rep = np.arange(N)
    for a, b in zip(act_from, act_to):
        rep[b] = a
    row_of = np.where(fixed[rep], -1, free_pos[rep])
    row_of[net.reservoir_mask] = -1
    nodes_with_row = np.flatnonzero(row_of >= 0)
    R = sp.csr_matrix((np.ones(len(nodes_with_row)), (row_of[nodes_with_row], nodes_with_row)),
                      shape=(len(free), N))

    m = len(flow_links)
    lf, lt = net.link_from[flow_links], net.link_to[flow_links]
    A = sp.csr_matrix((np.r_[np.ones(m), -np.ones(m)], (np.r_[np.arange(m), np.arange(m)], np.r_[lf, lt])),
                      shape=(m, N))
    A_free = A[:, free].tocsc()
    h_fix = np.where(fixed, h, 0.0)
    known_drop = A @ h_fix
    RAt = (R @ A.T).tocsr()
    d = prob.demands

    is_pipe = kind == 0
    pipe_pos = np.full(net.n_links, -1, dtype=np.int64)
    pipe_pos[net.pipe_idx] = np.arange(len(net.pipe_idx))
    r = prob.r[pipe_pos[flow_links[is_pipe]]]
    pump_pos = np.full(net.n_links, -1, dtype=np.int64)
    pump_pos[net.pump_idx] = np.arange(len(net.pump_idx))
    sel = pump_pos[flow_links[kind == 1]]
    pump = (prob.pump_speed[sel], prob.pump_shutoff[sel], prob.pump_coeff[sel], prob.pump_exponent[sel])

    if q_init is not None:
        q = q_init[flow_links].copy()
    else:
        q = np.zeros(m)
        # pipes start near 0.3 m/s, pumps at half their shut-off head
        dia = np.zeros(net.n_links)
        dia[net.pipe_idx] = net.pipe_diameter
        q[is_pipe] = 0.3 * np.pi / 4 * dia[flow_links[is_pipe]] ** 2
        w, s, c, n = pump
        q[kind == 1] = w * (s / (2 * c)) ** (1 / n)
    h_free = np.full(len(free), prob.heads[net.reservoir_idx].mean())
    h[free] = h_free

    eps = cfg.regularization
    merit_prev = np.inf
    for it in range(1, cfg.max_iterations + 1):
        F, dF = _headloss(q, kind, r, pump, HW_EXPONENT)
        dF = np.maximum(dF, _floor(kind, r, pump, eps))
        E = F - (A_free @ h_free + known_drop)
        M = R @ d + RAt @ q
        Dinv = 1.0 / dF
        J = (RAt @ sp.diags(Dinv) @ A_free).tocsc()
        rhs = RAt @ (Dinv * E) - M
        dh = spla.spsolve(J, rhs) if J.shape[0] else np.zeros(0)
        dq = Dinv * (A_free @ dh - E)
        if not (np.all(np.isfinite(dh)) and np.all(np.isfinite(dq))):
            raise DivergenceError("non-finite Newton step", float(np.max(np.abs(E))))
        step = 1.0
        for _ in range(8):
            q_new = q + step * dq
            h_new = h_free + step * dh
            F_new, _ = _headloss(q_new, kind, r, pump, HW_EXPONENT)
            E_new = F_new - (A_free @ h_new + known_drop)
            merit = np.max(np.abs(E_new)) + np.max(np.abs(R @ d + RAt @ q_new), initial=0.0)
            if merit <= merit_prev or merit < cfg.tolerance:
                break
            step *= 0.5
        q, h_free = q_new, h_new
        merit_prev = merit
        info.iterations = it
        if np.max(np.abs(step * dh), initial=0.0) <= cfg.tolerance and np.max(np.abs(E_new)) <= cfg.tolerance:
            break
    else:
        raise DivergenceError(f"no convergence in {cfg.max_iterations} iterations", float(merit_prev))

    h[free] = h_free
    flows = np.zeros(net.n_links)
    flows[flow_links] = q
    # active PRV flow closes the receiving node's mass balance
    if active.any():
        out = np.zeros(N)
        np.add.at(out, net.link_from[flow_links], q)
        np.add.at(out, net.link_to[flow_links], -q)
        flows[net.prv_idx[active]] = out[act_to] + d[act_to]
    return h, flows


def _floor(kind, r, pump, eps):
    fl = np.zeros(len(kind))
    fl[kind == 0] = HW_EXPONENT * r * eps ** (HW_EXPONENT - 1.0)
    if (kind == 1).any():
        w, s, c, n = pump
        fl[kind == 1] = n * c * w ** (2.0 - n) * eps ** (n - 1.0)
    fl[kind == 2] = OPEN_PRV_RESISTANCE
    return fl


def solve_problem(net: NetworkModel, prob: HydraulicProblem, cfg: SolverConfig | None = None,
                  info: SolveInfo | None = None) -> HydraulicState:
    """Solve an already assembled (raw or normalised) problem."""
    cfg = cfg or SolverConfig()
    info = info if info is not None else SolveInfo()
    if np.any(prob.demands[net.junction_idx] < 0):
        raise InfeasibleError("negative junction demand")
    n_prv = len(net.prv_idx)
    active = np.ones(n_prv, dtype=bool)
    q_prev = None
    for _ in range(2 * n_prv + 1):
        h, flows = _solve_statuses(net, prob, active, cfg, q_prev, info)
        changed = False
        for j in range(n_prv):
            a, b, k = net.prv_from[j], net.prv_to[j], net.prv_idx[j]
            if active[j] and h[a] < prob.prv_setting[j]:
                active[j] = False
                changed = True
                info.prv_open.append(net.links[k].id)
            elif not active[j] and h[b] > prob.prv_setting[j] + cfg.tolerance and flows[k] > 0:
                active[j] = True
                changed = True
        q_prev = flows
        if not changed:
            break
    for j in np.flatnonzero(active):
        k = net.prv_idx[j]
        if flows[k] < -cfg.tolerance:
            raise InfeasibleError(f"negative flow {flows[k]:.3e} through active PRV {net.links[k].id!r}")
    for j, k in enumerate(net.pump_idx):
        qmax = prob.pump_speed[j] * (prob.pump_shutoff[j] / prob.pump_coeff[j]) ** (1 / prob.pump_exponent[j])
        if flows[k] > qmax or flows[k] < 0:
            msg = f"pump {net.links[k].id!r} operates outside its curve (q={flows[k]:.4g})"
            info.warnings.append(msg)
            log.warning(msg)
    demands = prob.demands.copy()
    from .physics import node_demands

    demands[net.reservoir_idx] = node_demands(net, flows)[net.reservoir_idx]
    return HydraulicState(heads=h, flows=flows, demands=demands)


def solve(net: NetworkModel, scenario: Scenario | None = None, cfg: SolverConfig | None = None,
          info: SolveInfo | None = None) -> HydraulicState:
    """True steady state of ``net`` under ``scenario`` (base attributes if omitted)."""
    return solve_problem(net, net.problem(scenario), cfg, info)


@dataclass
class BatchResult:
    states: list[HydraulicState]
    ok: list[int]
    failures: dict[int, str]


def solve_batch(net: NetworkModel, scenarios, cfg: SolverConfig | None = None) -> BatchResult:
    """Solve every scenario; failures are reported per sample instead of raised."""
    states, ok, failures = [], [], {}
    for i, sc in enumerate(scenarios):
        try:
            states.append(solve(net, sc, cfg))
            ok.append(i)
        except (SolverError, ValueError) as exc:
            failures[i] = f"{type(exc).__name__}: {exc}"
    return BatchResult(states, ok, failures)


def mass_residual(net: NetworkModel, state: HydraulicState, demands: np.ndarray) -> np.ndarray:
    """Per-junction |sum of outflows + demand|."""
    from .physics import node_demands

    return np.abs(node_demands(net, state.flows) - demands)[net.junction_idx]


def energy_residual(net: NetworkModel, prob: HydraulicProblem, state: HydraulicState) -> np.ndarray:
    """Per-pipe |h_from - h_to - r sgn(q)|q|^x|."""
    q = state.flows[net.pipe_idx]
    dh = state.heads[net.link_from[net.pipe_idx]] - state.heads[net.link_to[net.pipe_idx]]
    return np.abs(dh - prob.r * np.sign(q) * np.abs(q) ** HW_EXPONENT)


def pump_residual(net: NetworkModel, prob: HydraulicProblem, state: HydraulicState) -> np.ndarray:
    q = state.flows[net.pump_idx]
    gain = state.heads[net.link_to[net.pump_idx]] - state.heads[net.link_from[net.pump_idx]]
    w = prob.pump_speed
    expected = w**2 * (prob.pump_shutoff - prob.pump_coeff * (q / w) ** prob.pump_exponent)
    return np.abs(gain - expected)
