"""Scenario sampling, oracle labelling and group-preserving splits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .inp import ScenarioSet
from .network import HydraulicState, NetworkModel
from .oracle import SolverConfig, solve_batch

REFRESH_PERIOD = 6
MAX_REDRAWS = 100


class DatagenError(ValueError):
    pass


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    demand_ss, dia_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(demand_ss), np.random.default_rng(dia_ss)


def sample_diameters(net: NetworkModel, n_groups: int, dia_std: float, rng: np.random.Generator) -> np.ndarray:
    """(n_groups, n_pipes) base diameters plus N(0, dia_std) metres, all positive."""
    base = net.pipe_diameter
    out = np.empty((n_groups, len(base)))
    for g in range(n_groups):
        dia = base + rng.normal(0.0, dia_std, len(base))
        for _ in range(MAX_REDRAWS):
            bad = np.flatnonzero(dia <= 0)
            if not len(bad):
                break
            dia[bad] = base[bad] + rng.normal(0.0, dia_std, len(bad))
        else:
            pid = net.links[net.pipe_idx[np.flatnonzero(dia <= 0)[0]]].id
            raise DatagenError(f"pipe {pid!r}: no positive diameter after {MAX_REDRAWS} redraws")
        out[g] = dia
    return out


def generate(net: NetworkModel, n_samples: int = 6000, demand_std: float = 0.1, dia_std: float = 0.01,
             seed: int = 0, refresh_period: int = REFRESH_PERIOD) -> ScenarioSet:
    """Sample demands and diameters.

    Each junction's demand is its base demand times (pattern + offset), both
    drawn from N(1, demand_std) per sample, floored at zero. Diameters get
    N(0, dia_std) metre noise that is redrawn every ``refresh_period`` samples.
    """
    if n_samples < 1:
        raise DatagenError("n_samples must be >= 1")
    if demand_std < 0 or dia_std < 0 or refresh_period < 1:
        raise DatagenError("standard deviations must be >= 0 and refresh_period >= 1")
    drng, prng = _streams(seed)
    J = net.junction_idx
    pattern = drng.normal(1.0, demand_std, (n_samples, len(J)))
    offset = drng.normal(1.0, demand_std, (n_samples, len(J)))
    raw = net.base_demands[J] * (pattern + offset)
    floored = (raw < 0).sum(axis=1)
    demands = np.zeros((n_samples, net.n_nodes))
    demands[:, J] = np.maximum(raw, 0.0)
    n_groups = -(-n_samples // refresh_period)
    groups = sample_diameters(net, n_groups, dia_std, prng)
    diameters = groups[np.arange(n_samples) // refresh_period]
    meta = {
        "network": net.name,
        "network_hash": net.hash,
        "seed": seed,
        "n_samples": n_samples,
        "demand_pattern": f"normal(1,{float(demand_std)!r})",
        "demand_offset": f"normal(1,{float(demand_std)!r})",
        "demand_std": repr(float(demand_std)),
        "dia_noise": f"normal(0,{float(dia_std)!r}) m",
        "dia_std": repr(float(dia_std)),
        "refresh_period": refresh_period,
        "floored_demands": int(floored.sum()),
    }
    return ScenarioSet(demands, diameters, meta, floored)


@dataclass
class LabelResult:
    states: list[HydraulicState]
    ok: list[int]  # sample indices that solved, aligned with ``states``
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def excluded(self) -> int:
        return len(self.failures)


def label(net: NetworkModel, sset: ScenarioSet, cfg: SolverConfig | None = None) -> LabelResult:
    """Oracle states for every scenario; failed solves are excluded and reported."""
    res = solve_batch(net, sset, cfg)
    return LabelResult(res.states, res.ok, res.failures)


def split(n_samples: int, ratios: Sequence[float] = (60, 20, 20), seed: int = 0,
          refresh_period: int = REFRESH_PERIOD) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffle whole diameter groups into train/validation/test sample indices."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 100.0):
        raise DatagenError(f"split ratios must be three non-negative numbers summing to 100, got {ratios}")
    n_groups = -(-n_samples // refresh_period)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
    perm = rng.permutation(n_groups)
    c1 = int(round(n_groups * ratios[0] / 100.0))
    c2 = int(round(n_groups * (ratios[0] + ratios[1]) / 100.0))
    out = []
    for grp in (perm[:c1], perm[c1:c2], perm[c2:]):
        idx = (np.sort(grp)[:, None] * refresh_period + np.arange(refresh_period)).ravel()
        out.append(idx[idx < n_samples])
    return out[0], out[1], out[2]
