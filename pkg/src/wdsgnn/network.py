"""In-memory water distribution network model.

Internal units are SI throughout: metres for lengths, diameters and heads,
m^3/s for flows and demands.
"""

from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Sequence, Union

import numpy as np

HW_EXPONENT = 1.852
HW_CONSTANT = 10.667


class NetworkError(ValueError):
    """Invalid network attribute or topology."""


class ConnectivityError(NetworkError):
    pass


class NodeKind(str, Enum):
    JUNCTION = "junction"
    RESERVOIR = "reservoir"


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    elevation: float = 0.0
    base_demand: float = 0.0
    fixed_head: float = math.nan

    @property
    def is_reservoir(self) -> bool:
        return self.kind is NodeKind.RESERVOIR


@dataclass(frozen=True)
class Pipe:
    length: float
    diameter: float
    roughness: float


@dataclass(frozen=True)
class Pump:
    """Power-law pump curve: gain = speed^2 * (shutoff - coeff * (q / speed)^exponent)."""

    speed: float
    shutoff: float
    coeff: float
    exponent: float

    def max_flow(self) -> float:
        """Flow at which the head gain reaches zero."""
        return self.speed * (self.shutoff / self.coeff) ** (1.0 / self.exponent)


@dataclass(frozen=True)
class Prv:
    setting: float  # head (m) imposed at the receiving node


LinkKind = Union[Pipe, Pump, Prv]


@dataclass(frozen=True)
class Link:
    id: str
    from_node: str
    to_node: str
    kind: LinkKind


def resistance(pipe: Pipe) -> float:
    """Hazen-Williams resistance coefficient of a pipe in SI units."""
    if not (pipe.length > 0 and pipe.diameter > 0 and pipe.roughness > 0):
        raise NetworkError(
            f"pipe attributes must be positive, got length={pipe.length}, "
            f"diameter={pipe.diameter}, roughness={pipe.roughness}"
        )
    return HW_CONSTANT * pipe.length * pipe.diameter**-4.871 * pipe.roughness**-1.852


def resistance_array(length: np.ndarray, diameter: np.ndarray, roughness: np.ndarray) -> np.ndarray:
    length = np.asarray(length, dtype=float)
    diameter = np.asarray(diameter, dtype=float)
    roughness = np.asarray(roughness, dtype=float)
    if np.any(length <= 0) or np.any(diameter <= 0) or np.any(roughness <= 0):
        raise NetworkError("pipe length, diameter and roughness must be positive")
    return HW_CONSTANT * length * diameter**-4.871 * roughness**-1.852


def phase_one_iterations(diameter: int, layers: int = 5) -> int:
    """Smallest T with T >= ceil(diameter / layers - 1), in exact integer arithmetic."""
    if layers < 1:
        raise ValueError("layers must be >= 1")
    return max(0, -((layers - diameter) // layers))


@dataclass(frozen=True)
class Scenario:
    """Per-node demands (zero at reservoirs) and per-pipe diameters for one sample."""

    demands: np.ndarray
    diameters: np.ndarray


@dataclass(frozen=True)
class HydraulicProblem:
    """Array view of everything a steady-state solve needs for one scenario.

    ``heads`` holds the fixed heads of reservoirs; entries of other nodes are
    ignored. Pump and PRV arrays follow the network's pump/PRV order.
    """

    demands: np.ndarray
    heads: np.ndarray
    r: np.ndarray
    pump_speed: np.ndarray
    pump_shutoff: np.ndarray
    pump_coeff: np.ndarray
    pump_exponent: np.ndarray
    prv_setting: np.ndarray

    def initial_heads(self, net: "NetworkModel") -> np.ndarray:
        """Reservoir heads, PRV settings at receiving nodes, zero elsewhere."""
        h0 = np.zeros(net.n_nodes)
        h0[net.reservoir_idx] = self.heads[net.reservoir_idx]
        h0[net.prv_to] = self.prv_setting
        return h0


@dataclass(frozen=True)
class HydraulicState:
    """Heads and demands per node, flows per link in the link's defined direction."""

    heads: np.ndarray
    flows: np.ndarray
    demands: np.ndarray

    def directed_flows(self) -> np.ndarray:
        return np.concatenate([self.flows, -self.flows])


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Immutable network graph.

    Nodes and links keep their input order; that order defines the dense
    indices used by every array in the package. Each link is also materialised
    as two directed edges: edge ``k < n_links`` runs from the link's start node
    to its end node, edge ``k + n_links`` is its reverse. A directed edge
    ``e = (v, u)`` carries the flow leaving ``v`` towards ``u`` and its
    messages are aggregated at ``v``.
    """

    nodes: tuple[Node, ...]
    links: tuple[Link, ...]
    name: str = "network"
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "links", tuple(self.links))
        seen = set()
        for n in self.nodes:
            if n.id in seen:
                raise NetworkError(f"duplicate node id {n.id!r}")
            seen.add(n.id)
        seen = set()
        for l in self.links:
            if l.id in seen:
                raise NetworkError(f"duplicate link id {l.id!r}")
            seen.add(l.id)
            for end in (l.from_node, l.to_node):
                if end not in self.node_index:
                    raise NetworkError(f"link {l.id!r} references unknown node {end!r}")

    # -- indices -----------------------------------------------------------

    @cached_property
    def node_index(self) -> dict[str, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    @cached_property
    def link_index(self) -> dict[str, int]:
        return {l.id: i for i, l in enumerate(self.links)}

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_edges(self) -> int:
        return 2 * len(self.links)

    @cached_property
    def link_from(self) -> np.ndarray:
        return np.array([self.node_index[l.from_node] for l in self.links], dtype=np.int64)

    @cached_property
    def link_to(self) -> np.ndarray:
        return np.array([self.node_index[l.to_node] for l in self.links], dtype=np.int64)

    @cached_property
    def edge_v(self) -> np.ndarray:
        """Owning node of each directed edge (flow leaves it, messages arrive at it)."""
        return np.concatenate([self.link_from, self.link_to])

    @cached_property
    def edge_u(self) -> np.ndarray:
        """Neighbour node of each directed edge."""
        return np.concatenate([self.link_to, self.link_from])

    @cached_property
    def edge_pair(self) -> np.ndarray:
        """Index of the reverse orientation of every directed edge."""
        L = self.n_links
        return np.concatenate([np.arange(L, 2 * L), np.arange(L)])

    @cached_property
    def edge_forward(self) -> np.ndarray:
        """True where the directed edge follows the link's defined direction."""
        return np.arange(self.n_edges) < self.n_links

    def _kind_idx(self, cls) -> np.ndarray:
        return np.array([i for i, l in enumerate(self.links) if isinstance(l.kind, cls)], dtype=np.int64)

    @cached_property
    def pipe_idx(self) -> np.ndarray:
        return self._kind_idx(Pipe)

    @cached_property
    def pump_idx(self) -> np.ndarray:
        return self._kind_idx(Pump)

    @cached_property
    def prv_idx(self) -> np.ndarray:
        return self._kind_idx(Prv)

    @cached_property
    def prv_from(self) -> np.ndarray:
        return self.link_from[self.prv_idx]

    @cached_property
    def prv_to(self) -> np.ndarray:
        return self.link_to[self.prv_idx]

    @cached_property
    def reservoir_mask(self) -> np.ndarray:
        return np.array([n.is_reservoir for n in self.nodes], dtype=bool)

    @cached_property
    def reservoir_idx(self) -> np.ndarray:
        return np.flatnonzero(self.reservoir_mask)

    @cached_property
    def junction_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.reservoir_mask)

    @cached_property
    def elevation(self) -> np.ndarray:
        return np.array([n.fixed_head if n.is_reservoir else n.elevation for n in self.nodes])

    # -- attribute arrays ---------------------------------------------------

    def _pipes(self) -> list[Pipe]:
        return [self.links[i].kind for i in self.pipe_idx]

    @cached_property
    def pipe_length(self) -> np.ndarray:
        return np.array([p.length for p in self._pipes()], dtype=float)

    @cached_property
    def pipe_diameter(self) -> np.ndarray:
        return np.array([p.diameter for p in self._pipes()], dtype=float)

    @cached_property
    def pipe_roughness(self) -> np.ndarray:
        return np.array([p.roughness for p in self._pipes()], dtype=float)

    @cached_property
    def base_demands(self) -> np.ndarray:
        return np.array([0.0 if n.is_reservoir else n.base_demand for n in self.nodes])

    @cached_property
    def fixed_heads(self) -> np.ndarray:
        return np.array([n.fixed_head if n.is_reservoir else 0.0 for n in self.nodes])

    def base_scenario(self) -> Scenario:
        return Scenario(demands=self.base_demands.copy(), diameters=self.pipe_diameter.copy())

    def problem(self, scenario: Scenario | None = None) -> HydraulicProblem:
        """Raw (SI) hydraulic problem for a scenario; base attributes if none given."""
        scenario = scenario or self.base_scenario()
        demands = np.asarray(scenario.demands, dtype=float)
        diameters = np.asarray(scenario.diameters, dtype=float)
        if demands.shape != (self.n_nodes,):
            raise NetworkError(f"expected {self.n_nodes} demands, got {demands.shape}")
        if diameters.shape != (len(self.pipe_idx),):
            raise NetworkError(f"expected {len(self.pipe_idx)} diameters, got {diameters.shape}")
        demands = np.where(self.reservoir_mask, 0.0, demands)
        pumps = [self.links[i].kind for i in self.pump_idx]
        return HydraulicProblem(
            demands=demands,
            heads=self.fixed_heads.copy(),
            r=resistance_array(self.pipe_length, diameters, self.pipe_roughness),
            pump_speed=np.array([p.speed for p in pumps], dtype=float),
            pump_shutoff=np.array([p.shutoff for p in pumps], dtype=float),
            pump_coeff=np.array([p.coeff for p in pumps], dtype=float),
            pump_exponent=np.array([p.exponent for p in pumps], dtype=float),
            prv_setting=np.array([self.links[i].kind.setting for i in self.prv_idx], dtype=float),
        )

    # -- topology -----------------------------------------------------------

    @cached_property
    def adjacency(self) -> list[list[int]]:
        """Undirected simple-graph neighbour lists (parallel links collapsed)."""
        nbrs: list[set[int]] = [set() for _ in self.nodes]
        for a, b in zip(self.link_from, self.link_to):
            nbrs[a].add(int(b))
            nbrs[b].add(int(a))
        return [sorted(s) for s in nbrs]

    def bfs_distances(self, source: int) -> np.ndarray:
        dist = np.full(self.n_nodes, -1, dtype=np.int64)
        dist[source] = 0
        queue = deque([source])
        adj = self.adjacency
        while queue:
            v = queue.popleft()
            for u in adj[v]:
                if dist[u] < 0:
                    dist[u] = dist[v] + 1
                    queue.append(u)
        return dist

    @cached_property
    def graph_diameter(self) -> int:
        return graph_diameter(self)

    @cached_property
    def hash(self) -> str:
        """Content hash over ids, topology and SI attributes."""
        h = hashlib.sha256()
        for n in self.nodes:
            h.update(f"N|{n.id}|{n.kind.value}|{n.elevation!r}|{n.base_demand!r}|{n.fixed_head!r}\n".encode())
        for l in self.links:
            h.update(f"L|{l.id}|{l.from_node}|{l.to_node}|{l.kind!r}\n".encode())
        return h.hexdigest()[:16]

    def summary(self) -> dict:
        return {
            "name": self.name,
            "junctions": len(self.junction_idx),
            "reservoirs": len(self.reservoir_idx),
            "pipes": len(self.pipe_idx),
            "pumps": len(self.pump_idx),
            "prvs": len(self.prv_idx),
            "diameter": self.graph_diameter,
        }

    def __repr__(self) -> str:
        return f"NetworkModel({self.name!r}, nodes={self.n_nodes}, links={self.n_links})"


def graph_diameter(net: NetworkModel) -> int:
    """Hop-count diameter of the undirected network via BFS from every node."""
    best = 0
    for s in range(net.n_nodes):
        dist = net.bfs_distances(s)
        if np.any(dist < 0):
            far = int(np.flatnonzero(dist < 0)[0])
            raise ConnectivityError(
                f"network is disconnected: {net.nodes[s].id!r} cannot reach {net.nodes[far].id!r}"
            )
        best = max(best, int(dist.max()))
    return best


def validate(net: NetworkModel) -> list[str]:
    """Return a list of invariant violations; empty when the network is usable."""
    problems: list[str] = []
    kinds = [n.kind for n in net.nodes]
    if NodeKind.RESERVOIR not in kinds:
        problems.append("network has no reservoir")
    if NodeKind.JUNCTION not in kinds:
        problems.append("network has no junction")
    for n in net.nodes:
        if n.is_reservoir and not math.isfinite(n.fixed_head):
            problems.append(f"reservoir {n.id!r}: fixed head is not finite")
        if not n.is_reservoir and not n.base_demand >= 0:
            problems.append(f"junction {n.id!r}: negative base demand {n.base_demand}")
    for l in net.links:
        if l.from_node == l.to_node:
            problems.append(f"link {l.id!r}: both ends at node {l.from_node!r}")
        k = l.kind
        if isinstance(k, Pipe):
            for attr in ("length", "diameter", "roughness"):
                val = getattr(k, attr)
                if not val > 0:
                    problems.append(f"pipe {l.id!r}: {attr} must be positive, got {val}")
        elif isinstance(k, Pump):
            for attr in ("speed", "shutoff", "coeff", "exponent"):
                val = getattr(k, attr)
                if not val > 0:
                    problems.append(f"pump {l.id!r}: {attr} must be positive, got {val}")
        elif isinstance(k, Prv):
            if not math.isfinite(k.setting):
                problems.append(f"prv {l.id!r}: setting is not finite")
    if net.n_nodes:
        dist = net.bfs_distances(0)
        if np.any(dist < 0):
            far = int(np.flatnonzero(dist < 0)[0])
            problems.append(
                f"network is disconnected: {net.nodes[0].id!r} cannot reach {net.nodes[far].id!r}"
            )
    return problems


def build_network(
    nodes: Sequence[Node], links: Sequence[Link], name: str = "network", metadata: dict | None = None
) -> NetworkModel:
    """Construct and validate; raises :class:`NetworkError` listing every violation."""
    net = NetworkModel(tuple(nodes), tuple(links), name=name, metadata=dict(metadata or {}))
    problems = validate(net)
    if problems:
        cls = ConnectivityError if any("disconnected" in p for p in problems) else NetworkError
        raise cls(f"{name}: " + "; ".join(problems))
    return net
