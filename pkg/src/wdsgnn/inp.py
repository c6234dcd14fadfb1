"""EPANET INP subset reader/writer plus the scenario and state CSV formats."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .network import (
    HydraulicState,
    Link,
    NetworkModel,
    Node,
    NodeKind,
    Pipe,
    Prv,
    Pump,
    Scenario,
    build_network,
)

log = logging.getLogger(__name__)

NETWORK_DIR = Path(__file__).parent / "networks"

FT = 0.3048
# EPANET converts psi to feet of water with 1 / 0.4333
PSI_TO_M = FT / 0.4333

# flow unit -> m^3/s
FLOW_UNITS = {
    "CFS": 0.028316846592,
    "GPM": 6.30901964e-5,
    "MGD": 0.0438126364,
    "IMGD": 0.0526167,
    "AFD": 0.0142764,
    "LPS": 1e-3,
    "LPM": 1e-3 / 60.0,
    "MLD": 1e3 / 86400.0,
    "CMH": 1.0 / 3600.0,
    "CMD": 1.0 / 86400.0,
    "CMS": 1.0,
}
US_UNITS = {"CFS", "GPM", "MGD", "IMGD", "AFD"}

KNOWN_SECTIONS = {
    "TITLE", "JUNCTIONS", "RESERVOIRS", "TANKS", "PIPES", "PUMPS", "VALVES", "DEMANDS",
    "PATTERNS", "CURVES", "OPTIONS", "COORDINATES", "END",
}
# sections that only matter for extended-period or quality runs
IGNORED_SECTIONS = {
    "TAGS", "STATUS", "CONTROLS", "RULES", "ENERGY", "EMITTERS", "QUALITY", "SOURCES",
    "REACTIONS", "MIXING", "TIMES", "REPORT", "VERTICES", "LABELS", "BACKDROP", "LEAKAGE",
}


class InpError(ValueError):
    """Malformed INP content; carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class FormatError(ValueError):
    """Malformed scenario/state CSV."""


@dataclass
class InpDocument:
    sections: dict[str, list[tuple[int, list[str]]]] = field(default_factory=dict)
    raw_unknown: dict[str, list[str]] = field(default_factory=dict)


@dataclass(frozen=True)
class UnitSystem:
    flow: str

    @property
    def flow_factor(self) -> float:
        return FLOW_UNITS[self.flow]

    @property
    def is_us(self) -> bool:
        return self.flow in US_UNITS

    @property
    def length_factor(self) -> float:
        return FT if self.is_us else 1.0

    @property
    def diameter_factor(self) -> float:
        return 0.0254 if self.is_us else 1e-3

    @property
    def pressure_factor(self) -> float:
        return PSI_TO_M if self.is_us else 1.0


def tokenize(text: str) -> tuple[InpDocument, list[str]]:
    doc = InpDocument()
    warnings: list[str] = []
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split(";", 1)[0].strip()
        if not body:
            continue
        if body.startswith("["):
            if not body.endswith("]"):
                raise InpError(f"bad section header {body!r}", lineno)
            current = body[1:-1].strip().upper()
            if current not in KNOWN_SECTIONS and current not in IGNORED_SECTIONS:
                warnings.append(f"unknown section [{current}] ignored")
                doc.raw_unknown.setdefault(current, [])
            continue
        if current is None:
            raise InpError("data before first section header", lineno)
        if current in doc.raw_unknown:
            doc.raw_unknown[current].append(line)
            continue
        doc.sections.setdefault(current, []).append((lineno, body.split()))
    return doc, warnings


def _num(tok: str, lineno: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise InpError(f"cannot parse number {tok!r}", lineno) from None


def _options(doc: InpDocument) -> dict[str, list[str]]:
    opts = {}
    for _, toks in doc.sections.get("OPTIONS", []):
        key = toks[0].upper()
        if key in ("DEMAND", "SPECIFIC", "EMITTER") and len(toks) > 1:
            key = f"{key} {toks[1].upper()}"
            opts[key] = toks[2:]
        else:
            opts[key] = toks[1:]
    return opts


def fit_pump_curve(points: Sequence[tuple[float, float]]) -> tuple[float, float, float]:
    """Power-law (shutoff, coeff, exponent) from EPANET curve points in SI units.

    One point: EPANET's design-point convention. Three points starting at zero
    flow: exact fit. Other multi-point curves: least squares in log space on
    the points after the shutoff point.
    """
    pts = [(float(q), float(h)) for q, h in points]
    if len(pts) == 1:
        q_d, h_d = pts[0]
        if q_d <= 0 or h_d <= 0:
            raise ValueError("one-point pump curve needs positive flow and head")
        shutoff = 4.0 / 3.0 * h_d
        return shutoff, shutoff / (4.0 * q_d**2), 2.0
    if pts[0][0] != 0.0:
        raise ValueError("multi-point pump curve must start at zero flow")
    shutoff = pts[0][1]
    rest = pts[1:]
    drops = np.array([shutoff - h for _, h in rest])
    flows = np.array([q for q, _ in rest])
    if np.any(drops <= 0) or np.any(flows <= 0):
        raise ValueError("pump curve heads must decrease from the shutoff head")
    if len(rest) == 2:
        (q1, _), (q2, _) = rest
        exponent = math.log(drops[1] / drops[0]) / math.log(q2 / q1)
        coeff = drops[0] / q1**exponent
        return shutoff, coeff, exponent
    exponent, log_coeff = np.polyfit(np.log(flows), np.log(drops), 1)
    return shutoff, float(math.exp(log_coeff)), float(exponent)


def parse_inp(text: str, name: str = "network", dw_roughness: float = 130.0) -> tuple[NetworkModel, list[str]]:
    """Parse INP text into an SI NetworkModel, returning it with a list of warnings.

    Tanks become reservoirs at elevation + initial level. Closed pipes are
    dropped. Demand patterns are ignored; [DEMANDS] rows for a junction are
    summed and replace its [JUNCTIONS] demand. When the headloss option is not
    H-W, the roughness column is replaced by ``dw_roughness``.
    """
    doc, warnings = tokenize(text)
    for required in ("JUNCTIONS", "PIPES"):
        if required not in doc.sections:
            raise InpError(f"missing required section [{required}]")
    if "RESERVOIRS" not in doc.sections and "TANKS" not in doc.sections:
        raise InpError("missing required section [RESERVOIRS]")

    opts = _options(doc)
    flow_tag = opts.get("UNITS", ["GPM"])[0].upper()
    if flow_tag not in FLOW_UNITS:
        raise InpError(f"unsupported flow units {flow_tag!r}")
    units = UnitSystem(flow_tag)
    headloss = opts.get("HEADLOSS", ["H-W"])[0].upper()
    multiplier = float(opts.get("DEMAND MULTIPLIER", ["1"])[0])
    metadata = {"units": flow_tag, "headloss": headloss, "demand_multiplier": multiplier}
    if headloss != "H-W":
        warnings.append(f"headloss {headloss} replaced by Hazen-Williams with C={dw_roughness}")
        metadata["substituted_roughness"] = dw_roughness

    lf, qf = units.length_factor, units.flow_factor
    elevation: dict[str, float] = {}
    demand: dict[str, float] = {}
    kinds: dict[str, NodeKind] = {}
    fixed: dict[str, float] = {}
    order: list[str] = []

    def add(node_id: str, lineno: int):
        if node_id in kinds:
            raise InpError(f"duplicate node id {node_id!r}", lineno)
        order.append(node_id)

    for lineno, toks in doc.sections.get("JUNCTIONS", []):
        nid = toks[0]
        add(nid, lineno)
        kinds[nid] = NodeKind.JUNCTION
        elevation[nid] = _num(toks[1], lineno) * lf if len(toks) > 1 else 0.0
        demand[nid] = _num(toks[2], lineno) * qf if len(toks) > 2 else 0.0
    for lineno, toks in doc.sections.get("RESERVOIRS", []):
        nid = toks[0]
        add(nid, lineno)
        kinds[nid] = NodeKind.RESERVOIR
        fixed[nid] = _num(toks[1], lineno) * lf
    tanks = []
    for lineno, toks in doc.sections.get("TANKS", []):
        nid = toks[0]
        add(nid, lineno)
        kinds[nid] = NodeKind.RESERVOIR
        fixed[nid] = (_num(toks[1], lineno) + _num(toks[2], lineno)) * lf
        tanks.append(nid)
    if tanks:
        warnings.append(f"tanks converted to reservoirs at initial level: {', '.join(tanks)}")
        metadata["tanks_as_reservoirs"] = ",".join(tanks)

    summed: dict[str, float] = {}
    for lineno, toks in doc.sections.get("DEMANDS", []):
        nid = toks[0]
        if kinds.get(nid) is not NodeKind.JUNCTION:
            raise InpError(f"[DEMANDS] references unknown junction {nid!r}", lineno)
        summed[nid] = summed.get(nid, 0.0) + _num(toks[1], lineno) * qf
    demand.update(summed)

    curves: dict[str, list[tuple[float, float]]] = {}
    for lineno, toks in doc.sections.get("CURVES", []):
        curves.setdefault(toks[0], []).append((_num(toks[1], lineno) * qf, _num(toks[2], lineno) * lf))

    def check_ends(a: str, b: str, lineno: int):
        for end in (a, b):
            if end not in kinds:
                raise InpError(f"dangling node reference {end!r}", lineno)

    links: list[Link] = []
    closed = []
    for lineno, toks in doc.sections.get("PIPES", []):
        if len(toks) < 6:
            raise InpError("pipe row needs id, nodes, length, diameter, roughness", lineno)
        lid, a, b = toks[:3]
        check_ends(a, b, lineno)
        status = toks[7].upper() if len(toks) > 7 else "OPEN"
        if status == "CLOSED":
            closed.append(lid)
            continue
        if status == "CV":
            warnings.append(f"check valve on pipe {lid} treated as a plain pipe")
        rough = _num(toks[5], lineno) if headloss == "H-W" else dw_roughness
        links.append(Link(lid, a, b, Pipe(
            length=_num(toks[3], lineno) * lf,
            diameter=_num(toks[4], lineno) * units.diameter_factor,
            roughness=rough,
        )))
    if closed:
        warnings.append(f"closed pipes dropped: {', '.join(closed)}")
    for lineno, toks in doc.sections.get("PUMPS", []):
        lid, a, b = toks[:3]
        check_ends(a, b, lineno)
        params = {toks[i].upper(): toks[i + 1] for i in range(3, len(toks) - 1, 2)}
        if "HEAD" not in params:
            raise InpError(f"pump {lid}: only HEAD curve pumps are supported", lineno)
        if params["HEAD"] not in curves:
            raise InpError(f"pump {lid}: unknown curve {params['HEAD']!r}", lineno)
        try:
            shutoff, coeff, exponent = fit_pump_curve(curves[params["HEAD"]])
        except ValueError as exc:
            raise InpError(f"pump {lid}: {exc}", lineno) from None
        speed = _num(params.get("SPEED", "1"), lineno)
        links.append(Link(lid, a, b, Pump(speed=speed, shutoff=shutoff, coeff=coeff, exponent=exponent)))
    for lineno, toks in doc.sections.get("VALVES", []):
        lid, a, b = toks[:3]
        check_ends(a, b, lineno)
        vtype = toks[4].upper()
        if vtype != "PRV":
            raise InpError(f"valve {lid}: unsupported valve type {vtype}", lineno)
        if kinds[b] is not NodeKind.JUNCTION:
            raise InpError(f"valve {lid}: receiving node must be a junction", lineno)
        setting = _num(toks[5], lineno) * units.pressure_factor + elevation[b]
        links.append(Link(lid, a, b, Prv(setting=setting)))

    nodes = []
    for nid in order:
        if kinds[nid] is NodeKind.JUNCTION:
            nodes.append(Node(nid, NodeKind.JUNCTION, elevation=elevation[nid],
                              base_demand=demand.get(nid, 0.0) * multiplier))
        else:
            nodes.append(Node(nid, NodeKind.RESERVOIR, elevation=fixed[nid], fixed_head=fixed[nid]))
    net = build_network(nodes, links, name=name, metadata=metadata)
    for w in warnings:
        log.warning("%s: %s", name, w)
    return net, warnings


def read_inp(path: str | os.PathLike, **kwargs) -> tuple[NetworkModel, list[str]]:
    path = Path(path)
    text = path.read_text(encoding="latin-1")
    return parse_inp(text, name=kwargs.pop("name", path.stem), **kwargs)


def network_path(name: str | os.PathLike) -> Path:
    """An existing INP path, or the bundled network whose stem matches ``name`` case-insensitively."""
    path = Path(name)
    if path.exists():
        return path
    for cand in sorted(NETWORK_DIR.glob("*.inp")):
        if cand.stem.lower() == str(name).lower():
            return cand
    raise FileNotFoundError(f"no network file or bundled network named {str(name)!r}")


def load_network(name: str, **kwargs) -> NetworkModel:
    """Load one of the bundled networks by file stem (e.g. ``"Hanoi"``) or a path."""
    return read_inp(network_path(name), **kwargs)[0]


def write_inp(net: NetworkModel) -> str:
    """Serialise a network as INP text in LPS units (SI)."""
    out = io.StringIO()
    w = out.write
    w(f"[TITLE]\n{net.name}\n\n[JUNCTIONS]\n")
    for n in net.nodes:
        if not n.is_reservoir:
            w(f" {n.id}\t{n.elevation!r}\t{n.base_demand * 1e3!r}\n")
    w("\n[RESERVOIRS]\n")
    for n in net.nodes:
        if n.is_reservoir:
            w(f" {n.id}\t{n.fixed_head!r}\n")
    w("\n[PIPES]\n")
    curves = []
    for l in net.links:
        if isinstance(l.kind, Pipe):
            p = l.kind
            w(f" {l.id}\t{l.from_node}\t{l.to_node}\t{p.length!r}\t{p.diameter * 1e3!r}\t{p.roughness!r}\t0\tOpen\n")
    w("\n[PUMPS]\n")
    for l in net.links:
        if isinstance(l.kind, Pump):
            p = l.kind
            cid = f"C_{l.id}"
            qmax = (p.shutoff / p.coeff) ** (1.0 / p.exponent)
            pts = [(0.0, p.shutoff)]
            for frac in (0.5, 1.0):
                q = frac * qmax
                pts.append((float(q * 1e3), float(p.shutoff - p.coeff * q**p.exponent)))
            curves.append((cid, pts))
            w(f" {l.id}\t{l.from_node}\t{l.to_node}\tHEAD {cid}\tSPEED {p.speed!r}\n")
    w("\n[VALVES]\n")
    elev = {n.id: n.elevation for n in net.nodes}
    for l in net.links:
        if isinstance(l.kind, Prv):
            w(f" {l.id}\t{l.from_node}\t{l.to_node}\t0\tPRV\t{l.kind.setting - elev[l.to_node]!r}\t0\n")
    w("\n[CURVES]\n")
    for cid, pts in curves:
        for q, h in pts:
            w(f" {cid}\t{q!r}\t{h!r}\n")
    w("\n[OPTIONS]\n Units\tLPS\n Headloss\tH-W\n\n[END]\n")
    return out.getvalue()


# -- metadata sidecars ------------------------------------------------------


def write_meta(path: str | os.PathLike, meta: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for key in sorted(meta):
            f.write(f"{key}={meta[key]}\n")


def read_meta(path: str | os.PathLike) -> dict[str, str]:
    meta = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                meta[key.strip()] = value.strip()
    return meta


def meta_path(path: str | os.PathLike) -> Path:
    return Path(f"{path}.meta")


# -- scenario CSV -------------------------------------------------------------

SCENARIO_HEADER = ["sample_id", "element_kind", "element_id", "quantity", "value"]


@dataclass
class ScenarioSet:
    """Batch of input scenarios over one network with their provenance."""

    demands: np.ndarray  # (n_samples, n_nodes), zero at reservoirs
    diameters: np.ndarray  # (n_samples, n_pipes)
    meta: dict = field(default_factory=dict)
    floored: np.ndarray | None = None  # per-sample count of demands floored at zero

    def __len__(self) -> int:
        return self.demands.shape[0]

    def __getitem__(self, i: int) -> Scenario:
        return Scenario(self.demands[i], self.diameters[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx: Sequence[int]) -> "ScenarioSet":
        idx = np.asarray(idx, dtype=np.int64)
        floored = None if self.floored is None else self.floored[idx]
        meta = dict(self.meta, n_samples=len(idx))
        return ScenarioSet(self.demands[idx], self.diameters[idx], meta, floored)


def write_scenarios(sset: ScenarioSet, path: str | os.PathLike, net: NetworkModel) -> None:
    """Write the columnar scenario CSV and its ``.meta`` sidecar."""
    if sset.demands.shape[1:] != (net.n_nodes,) and len(sset):
        raise FormatError("scenario demands do not match the network's node count")
    if sset.diameters.shape[1:] != (len(net.pipe_idx),) and len(sset):
        raise FormatError("scenario diameters do not match the network's pipe count")
    junctions = [(i, net.nodes[i].id) for i in net.junction_idx]
    pipes = [net.links[i].id for i in net.pipe_idx]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SCENARIO_HEADER)
        for s in range(len(sset)):
            dem, dia = sset.demands[s], sset.diameters[s]
            for i, nid in junctions:
                writer.writerow([s, "junction", nid, "demand", repr(float(dem[i]))])
            for k, lid in enumerate(pipes):
                writer.writerow([s, "pipe", lid, "diameter", repr(float(dia[k]))])
    meta = dict(sset.meta)
    meta.setdefault("network_hash", net.hash)
    meta["n_samples"] = len(sset)
    write_meta(meta_path(path), meta)


def read_scenarios(path: str | os.PathLike, net: NetworkModel) -> ScenarioSet:
    rows_by_sample: dict[int, list] = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != SCENARIO_HEADER:
            raise FormatError(f"row 1: unexpected header {header}")
        for rowno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise FormatError(f"row {rowno}: expected 5 columns, got {len(row)}")
            try:
                sid, val = int(row[0]), float(row[4])
            except ValueError:
                raise FormatError(f"row {rowno}: malformed number") from None
            rows_by_sample.setdefault(sid, []).append((rowno, row[1], row[2], row[3], val))
    n = len(rows_by_sample)
    if sorted(rows_by_sample) != list(range(n)):
        raise FormatError("sample ids must be contiguous from 0")
    demands = np.zeros((n, net.n_nodes))
    diameters = np.tile(net.pipe_diameter, (n, 1))
    pipe_pos = {net.links[i].id: k for k, i in enumerate(net.pipe_idx)}
    for sid, rows in rows_by_sample.items():
        for rowno, kind, eid, qty, val in rows:
            if kind == "junction" and qty == "demand":
                i = net.node_index.get(eid)
                if i is None or net.reservoir_mask[i]:
                    raise FormatError(f"row {rowno}: unknown junction id {eid!r}")
                demands[sid, i] = val
            elif kind == "pipe" and qty == "diameter":
                k = pipe_pos.get(eid)
                if k is None:
                    raise FormatError(f"row {rowno}: unknown pipe id {eid!r}")
                diameters[sid, k] = val
            else:
                raise FormatError(f"row {rowno}: unknown element/quantity {kind}/{qty}")
    mp = meta_path(path)
    meta = read_meta(mp) if mp.exists() else {}
    return ScenarioSet(demands, diameters, meta)


# -- state CSV ----------------------------------------------------------------

STATE_HEADER = ["sample_id", "element_kind", "element_id", "quantity", "value", "pressure_head"]


def write_state(states: Sequence[HydraulicState], path: str | os.PathLike, net: NetworkModel,
                meta: dict | None = None, sample_ids: Sequence[int] | None = None) -> None:
    """One row per (sample, element, quantity) in dense index order.

    Junctions get ``head`` (with the pressure head above elevation in the last
    column) and ``demand`` rows, reservoirs a ``head`` row, links a ``flow``
    row in their defined direction.
    """
    ids = list(range(len(states))) if sample_ids is None else list(sample_ids)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(STATE_HEADER)
        for sid, st in zip(ids, states):
            for i, n in enumerate(net.nodes):
                h = float(st.heads[i])
                if n.is_reservoir:
                    writer.writerow([sid, "reservoir", n.id, "head", repr(h), ""])
                else:
                    writer.writerow([sid, "junction", n.id, "head", repr(h), repr(h - n.elevation)])
                    writer.writerow([sid, "junction", n.id, "demand", repr(float(st.demands[i])), ""])
            for k, l in enumerate(net.links):
                writer.writerow([sid, "link", l.id, "flow", repr(float(st.flows[k])), ""])
    if meta is not None:
        write_meta(meta_path(path), dict(meta, network_hash=net.hash, n_samples=len(ids)))


def read_state(path: str | os.PathLike, net: NetworkModel) -> tuple[list[int], list[HydraulicState]]:
    """Inverse of ``write_state``; reservoir demands are recomputed from flows."""
    from .physics import node_demands

    samples: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != STATE_HEADER:
            raise FormatError(f"row 1: unexpected header {header}")
        for rowno, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise FormatError(f"row {rowno}: expected 6 columns, got {len(row)}")
            try:
                sid, val = int(row[0]), float(row[4])
            except ValueError:
                raise FormatError(f"row {rowno}: malformed number") from None
            if sid not in samples:
                samples[sid] = (np.zeros(net.n_nodes), np.zeros(net.n_links), np.zeros(net.n_nodes))
            heads, flows, demands = samples[sid]
            kind, eid, qty = row[1], row[2], row[3]
            if kind in ("junction", "reservoir"):
                i = net.node_index.get(eid)
                if i is None:
                    raise FormatError(f"row {rowno}: unknown node id {eid!r}")
                if qty == "head":
                    heads[i] = val
                elif qty == "demand":
                    demands[i] = val
                else:
                    raise FormatError(f"row {rowno}: unknown quantity {qty!r}")
            elif kind == "link" and qty == "flow":
                k = net.link_index.get(eid)
                if k is None:
                    raise FormatError(f"row {rowno}: unknown link id {eid!r}")
                flows[k] = val
            else:
                raise FormatError(f"row {rowno}: unknown element/quantity {kind}/{qty}")
    ids = sorted(samples)
    states = []
    for sid in ids:
        heads, flows, demands = samples[sid]
        supply = node_demands(net, flows)
        demands[net.reservoir_idx] = supply[net.reservoir_idx]
        states.append(HydraulicState(heads, flows, demands))
    return ids, states

