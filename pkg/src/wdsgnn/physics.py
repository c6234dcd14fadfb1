"""Global physics step: rebuild heads from estimated flows, then recover flows and demands.

All functions work on batches: node arrays are (B, n_nodes), directed-edge
arrays (B, 2 * n_links), per-pipe and per-pump attributes (B, n_pipes) and
(B, n_pumps). They are written with :mod:`wdsgnn.autodiff` operations so the
same code runs plain (no tape) or differentiated (inside a tape).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Segments, Tensor
from .network import HW_EXPONENT, HydraulicProblem, NetworkModel

DEFAULT_ZETA = 1e-12
DEFAULT_EPSILON = 1e-9


class PhysicsError(FloatingPointError):
    pass


@dataclass(frozen=True)
class GraphIndex:
    """Index arrays over a network's doubled edge list, built once per network."""

    n_nodes: int
    n_links: int
    edge_v: Segments  # directed edges grouped by owning node
    edge_u: np.ndarray
    edge_u_seg: Segments  # same edges grouped by neighbour, for gathers
    link_from: np.ndarray
    link_to: np.ndarray
    link_from_seg: Segments
    link_to_seg: Segments
    pipe_idx: np.ndarray
    pump_idx: np.ndarray
    prv_idx: np.ndarray
    prv_to: np.ndarray
    msg_pipe_edges: np.ndarray  # directed pipe edges that carry head messages
    msg_pipe_pos: np.ndarray  # their pipe position (index into per-pipe arrays)
    msg_pump_edges: np.ndarray  # reverse orientation of each pump (message into its outlet)
    msg_pump_pos: np.ndarray
    msg_u: np.ndarray
    msg_v: Segments
    reservoir_mask: np.ndarray
    sweep_cap: int


@lru_cache(maxsize=64)
def graph_index(net: NetworkModel) -> GraphIndex:
    L = net.n_links
    pipe_pos = np.full(L, -1, dtype=np.int64)
    pipe_pos[net.pipe_idx] = np.arange(len(net.pipe_idx))
    res = net.reservoir_mask
    pipe_edges = np.concatenate([net.pipe_idx, net.pipe_idx + L])
    pipe_edges = pipe_edges[~res[net.edge_v[pipe_edges]]]
    pump_edges = net.pump_idx + L
    pump_keep = ~res[net.edge_v[pump_edges]]
    pump_edges = pump_edges[pump_keep]
    msg_edges = np.concatenate([pipe_edges, pump_edges])
    return GraphIndex(
        n_nodes=net.n_nodes,
        n_links=L,
        edge_v=Segments(net.edge_v, net.n_nodes),
        edge_u=net.edge_u,
        edge_u_seg=Segments(net.edge_u, net.n_nodes),
        link_from=net.link_from,
        link_to=net.link_to,
        link_from_seg=Segments(net.link_from, net.n_nodes),
        link_to_seg=Segments(net.link_to, net.n_nodes),
        pipe_idx=net.pipe_idx,
        pump_idx=net.pump_idx,
        prv_idx=net.prv_idx,
        prv_to=net.prv_to,
        msg_pipe_edges=pipe_edges,
        msg_pipe_pos=pipe_pos[pipe_edges % L],
        msg_pump_edges=pump_edges,
        msg_pump_pos=np.flatnonzero(pump_keep),
        msg_u=net.edge_u[msg_edges],
        msg_v=Segments(net.edge_v[msg_edges], net.n_nodes),
        reservoir_mask=res,
        sweep_cap=2 * net.graph_diameter,
    )


@dataclass
class PhysicsInputs:
    """Batched inputs of the physics step (normalised units)."""

    h0: np.ndarray  # fixed heads at reservoirs and PRV outlets, zero elsewhere
    q_hat: Tensor | np.ndarray
    r: np.ndarray
    pump_speed: np.ndarray
    pump_shutoff: np.ndarray
    pump_coeff: np.ndarray
    pump_exponent: np.ndarray
    demands: np.ndarray  # true junction demands, used by the PRV flow rule
    zeta: float = DEFAULT_ZETA

    @classmethod
    def from_problems(cls, net: NetworkModel, problems, q_hat, zeta: float = DEFAULT_ZETA) -> "PhysicsInputs":
        problems = list(problems)
        stack = lambda attr: np.stack([getattr(p, attr) for p in problems])
        return cls(
            h0=np.stack([p.initial_heads(net) for p in problems]),
            q_hat=q_hat,
            r=stack("r"),
            pump_speed=stack("pump_speed"),
            pump_shutoff=stack("pump_shutoff"),
            pump_coeff=stack("pump_coeff"),
            pump_exponent=stack("pump_exponent"),
            demands=stack("demands"),
            zeta=zeta,
        )


def _check_finite(values: np.ndarray, edges: np.ndarray, what: str):
    bad = ~np.isfinite(values)
    if bad.any():
        col = int(np.flatnonzero(bad.any(axis=0))[0])
        raise PhysicsError(f"non-finite {what} on directed edge {int(edges[col])}")


def head_messages(gi: GraphIndex, inp: PhysicsInputs) -> Tensor:
    """Head change carried by each message edge, independent of the heads."""
    q = ad._tensor(inp.q_hat)
    # relu would silently map NaN to zero, so screen the estimate itself
    _check_finite(q.value, np.arange(q.shape[-1]), "flow estimate")
    parts = []
    if len(gi.msg_pipe_edges):
        inflow = ad.relu(-ad.gather(q, gi.msg_pipe_edges, axis=1))
        r = inp.r[:, gi.msg_pipe_pos]
        parts.append(-(r * ad.pow_abs(inflow, HW_EXPONENT)))
    if len(gi.msg_pump_edges):
        k = gi.msg_pump_pos
        w, s, c, n = inp.pump_speed[:, k], inp.pump_shutoff[:, k], inp.pump_coeff[:, k], inp.pump_exponent[:, k]
        inflow = ad.relu(-ad.gather(q, gi.msg_pump_edges, axis=1))
        parts.append(w**2 * s - (c * w ** (2.0 - n)) * ad.pow_abs(inflow, n))
    off = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    _check_finite(off.value, np.concatenate([gi.msg_pipe_edges, gi.msg_pump_edges]), "head message")
    return off


def reconstruct_heads(net: NetworkModel, inp: PhysicsInputs, max_sweeps: int | None = None,
                      epsilon: float = DEFAULT_EPSILON) -> tuple[Tensor, int]:
    """Max-propagate heads from the fixed-head nodes; returns heads and sweeps used."""
    gi = graph_index(net)
    max_sweeps = gi.sweep_cap if max_sweeps is None else max_sweeps
    if max_sweeps < 1:
        raise ValueError("max_sweeps must be >= 1")
    h = Tensor(inp.h0)
    if not len(gi.msg_u):
        return h, 0
    off = head_messages(gi, inp)
    cap = None
    if len(gi.prv_to):
        cap = np.full(inp.h0.shape, np.inf)
        cap[:, gi.prv_to] = inp.h0[:, gi.prv_to]
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        msgs = ad.gather(h, gi.msg_u, axis=1) + off
        best = ad.segment_max(msgs, gi.msg_v, axis=1)
        h_new = ad.maximum(h, best)
        if cap is not None:
            h_new = ad.minimum(h_new, cap)
        change = np.max(np.abs(h_new.value - h.value))
        h = h_new
        if change < epsilon:
            break
    return h, sweeps


def recover_flows(net: NetworkModel, h: Tensor, inp: PhysicsInputs) -> Tensor:
    """Directed-edge flows implied by the heads; PRV flows close their outlet's mass balance."""
    gi = graph_index(net)
    h = ad._tensor(h)
    L = gi.n_links
    parts = []
    if len(gi.pipe_idx):
        dh = ad.gather(h, gi.link_from[gi.pipe_idx], axis=1) - ad.gather(h, gi.link_to[gi.pipe_idx], axis=1)
        q = ad.sgn(dh) * ad.pow_abs(dh / inp.r, 1.0 / HW_EXPONENT) + inp.zeta
        parts.append(ad.scatter(q, gi.pipe_idx, L, axis=1))
    if len(gi.pump_idx):
        w, s, c, n = inp.pump_speed, inp.pump_shutoff, inp.pump_coeff, inp.pump_exponent
        gain = ad.gather(h, gi.link_to[gi.pump_idx], axis=1) - ad.gather(h, gi.link_from[gi.pump_idx], axis=1)
        slack = ad.relu((w**2 * s - ad.absolute(gain)) * (1.0 / (c * w ** (2.0 - n))))
        q = ad.sgn(gain) * ad.pow_abs(slack, 1.0 / n) + inp.zeta
        parts.append(ad.scatter(q, gi.pump_idx, L, axis=1))
    q_link = parts[0]
    for p in parts[1:]:
        q_link = q_link + p
    if len(gi.prv_idx):
        # PRV entries are still zero here, so they drop out of the outflow sums
        q_dir = ad.concat([q_link, -q_link], axis=1)
        outflow = ad.segment_sum(q_dir, gi.edge_v, axis=1)
        q_prv = ad.gather(outflow, gi.prv_to, axis=1) + inp.demands[:, gi.prv_to]
        q_link = q_link + ad.scatter(q_prv, gi.prv_idx, L, axis=1)
    q_dir = ad.concat([q_link, -q_link], axis=1)
    _check_finite(q_dir.value, np.arange(2 * L), "recovered flow")
    return q_dir


def recover_demands(net: NetworkModel, q_dir) -> Tensor:
    """d_v = -(sum of flows leaving v) over the doubled edge list."""
    gi = graph_index(net)
    return -ad.segment_sum(q_dir, gi.edge_v, axis=1)


@dataclass
class PhysicsOutputs:
    h_tilde: Tensor
    q_tilde: Tensor  # directed-edge flows, antisymmetric
    d_tilde: Tensor
    sweeps: int


def physics_step(net: NetworkModel, inp: PhysicsInputs, max_sweeps: int | None = None,
                 epsilon: float = DEFAULT_EPSILON) -> PhysicsOutputs:
    """Heads, then flows and demands, from estimated flows."""
    h, sweeps = reconstruct_heads(net, inp, max_sweeps, epsilon)
    q = recover_flows(net, h, inp)
    return PhysicsOutputs(h, q, recover_demands(net, q), sweeps)


def node_demands(net: NetworkModel, flows: np.ndarray) -> np.ndarray:
    """Plain-numpy demands from link flows in their defined direction."""
    flows = np.asarray(flows, dtype=float)
    q_dir = np.concatenate([flows, -flows], axis=-1)
    return -ad.segment_sum_array(q_dir, graph_index(net).edge_v, q_dir.ndim - 1)


def problem_inputs(net: NetworkModel, prob: HydraulicProblem, flows: np.ndarray,
                   zeta: float = DEFAULT_ZETA) -> PhysicsInputs:
    """Single-sample physics inputs (batch of one) from a problem and link flows."""
    q_dir = np.concatenate([flows, -flows])[None, :]
    return PhysicsInputs.from_problems(net, [prob], q_dir, zeta)
