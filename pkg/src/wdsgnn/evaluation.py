"""Metrics, robustness sweeps and wall-clock benchmarks for a trained surrogate."""

from __future__ import annotations

import csv
import logging
import os
import platform
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import datagen
from .gnn import SurrogateModel
from .network import HydraulicState, NetworkModel
from .normalization import denormalize
from .oracle import SolverConfig, solve_batch
from .physics import PhysicsOutputs  # noqa: F401  (re-exported for callers)
from .plotting import line_plot_svg
from .training import Dataset, two_phase_forward

log = logging.getLogger(__name__)

FEATURES = ("heads", "flows", "demands")


class ModelMismatchError(ValueError):
    pass


@dataclass
class MetricReport:
    """Min-max normalised MAE per feature: mean and std across samples."""

    mean: dict[str, float]
    std: dict[str, float]
    n_samples: int
    warnings: list[str] = field(default_factory=list)

    @property
    def combined(self) -> float:
        return float(np.mean([self.mean[f] for f in FEATURES]))

    def rows(self) -> list[list[str]]:
        out = [[f, repr(self.mean[f]), repr(self.std[f])] for f in FEATURES]
        out.append(["combined", repr(self.combined), ""])
        return out

    def write_csv(self, path: str | os.PathLike):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "mae_mean", "mae_std"])
            w.writerows(self.rows())


def _feature_arrays(net: NetworkModel, states: Sequence[HydraulicState]) -> dict[str, np.ndarray]:
    return {
        "heads": np.array([s.heads for s in states]).reshape(len(states), net.n_nodes),
        "flows": np.array([s.flows for s in states]).reshape(len(states), net.n_links),
        "demands": np.array([s.demands[net.junction_idx] for s in states]).reshape(len(states), -1),
    }


def normalized_mae(net: NetworkModel, estimated: Sequence[HydraulicState],
                   truth: Sequence[HydraulicState]) -> MetricReport:
    """Scale both sides by the min/max of the true values over the whole set, then MAE per sample."""
    if len(estimated) != len(truth):
        raise ValueError(f"{len(estimated)} estimates for {len(truth)} true states")
    if not len(truth):
        raise ValueError("empty evaluation set")
    est, tru = _feature_arrays(net, estimated), _feature_arrays(net, truth)
    mean, std, warnings = {}, {}, []
    for f in FEATURES:
        lo, hi = float(tru[f].min()), float(tru[f].max())
        if hi > lo:
            scale = hi - lo
        else:
            scale = 1.0
            lo = 0.0
            warnings.append(f"{f}: true values are constant; MAE reported unscaled")
            log.warning(warnings[-1])
        per_sample = np.mean(np.abs((est[f] - lo) / scale - (tru[f] - lo) / scale), axis=1)
        mean[f] = float(per_sample.mean())
        std[f] = float(per_sample.std())
    return MetricReport(mean, std, len(truth), warnings)


def model_settings(model: SurrogateModel) -> tuple[int, int]:
    """(T, K) used at evaluation: phase-one length and the top of the K range."""
    try:
        return int(model.meta["T"]), int(model.meta["k_max"])
    except KeyError as exc:
        raise ModelMismatchError(f"checkpoint lacks {exc.args[0]!r}; was it produced by training?") from None


def check_network(model: SurrogateModel, net: NetworkModel):
    want = model.meta.get("network_hash")
    if want is not None and want != net.hash:
        raise ModelMismatchError(f"checkpoint was trained on network hash {want}, got {net.hash} ({net.name})")


def predict(model: SurrogateModel, data: Dataset, K: int | None = None, T: int | None = None,
            batch_size: int = 32, max_sweeps: int | None = None) -> list[HydraulicState]:
    """Surrogate states (heads, flows, demands) in physical units."""
    check_network(model, data.net)
    T0, K0 = model_settings(model)
    T = T0 if T is None else T
    K = K0 if K is None else K
    net = data.net
    L = net.n_links
    out: list[HydraulicState] = []
    for s in range(0, len(data), batch_size):
        idx = list(range(s, min(s + batch_size, len(data))))
        res = two_phase_forward(model, net, data.inputs(idx), K, T, max_sweeps)
        h, q, d = res.h_tilde.value, res.q_tilde.value[:, :L], res.d_tilde.value
        for b, i in enumerate(idx):
            state = HydraulicState(heads=h[b].copy(), flows=q[b].copy(), demands=d[b].copy())
            out.append(denormalize(state, data.contexts[i]))
    return out


def evaluate(model: SurrogateModel, net: NetworkModel, data: Dataset, batch_size: int = 32) -> MetricReport:
    if data.states is None:
        raise ValueError("evaluation set has no oracle labels")
    if data.net is not net and data.net.hash != net.hash:
        raise ModelMismatchError("dataset belongs to a different network")
    check_network(model, net)
    return normalized_mae(net, predict(model, data, batch_size=batch_size), data.states)


def labeled_dataset(net: NetworkModel, n: int, demand_std: float, dia_std: float, seed: int,
                    cfg: SolverConfig | None = None) -> tuple[Dataset, int]:
    """Generate, label and normalise a set; returns it with the number of failed solves."""
    sset = datagen.generate(net, n, demand_std, dia_std, seed)
    lab = datagen.label(net, sset, cfg)
    data = Dataset.build(net, [sset[i] for i in lab.ok], lab.states, lab.ok)
    return data, lab.excluded


# -- robustness sweep -------------------------------------------------------------------------

DEMAND_GRID = tuple(round(0.1 * i, 2) for i in range(1, 11))
DIAMETER_GRID = tuple(round(0.01 * i, 3) for i in range(1, 11))


@dataclass
class SweepSpec:
    parameter: str = "demand_std"  # or "dia_std"
    grid: tuple[float, ...] = DEMAND_GRID
    samples: int = 1000
    repeats: int = 10
    seed: int = 0
    fixed_demand_std: float = 0.1
    fixed_dia_std: float = 0.01

    def __post_init__(self):
        if self.parameter not in ("demand_std", "dia_std"):
            raise ValueError(f"unknown sweep parameter {self.parameter!r}")
        if self.samples < 1 or self.repeats < 1:
            raise ValueError("samples and repeats must be >= 1")

    @classmethod
    def for_parameter(cls, parameter: str, **kw) -> "SweepSpec":
        return cls(parameter, DEMAND_GRID if parameter == "demand_std" else DIAMETER_GRID, **kw)

    def seeds(self) -> list[int]:
        return [self.seed + 1000 * r for r in range(self.repeats)]


SWEEP_COLUMNS = ("std", "combined_mae_mean", "combined_mae_std", "combined_of_pooled", "heads_mae",
                 "flows_mae", "demands_mae", "n_samples", "n_failed")


def robustness_sweep(model: SurrogateModel, net: NetworkModel, spec: SweepSpec) -> list[list]:
    """One row per grid point.

    ``combined_mae_mean`` averages each seed's combined MAE over seeds;
    ``combined_of_pooled`` combines the per-feature MAEs averaged over seeds.
    """
    check_network(model, net)
    rows = []
    for std in spec.grid:
        dem = std if spec.parameter == "demand_std" else spec.fixed_demand_std
        dia = std if spec.parameter == "dia_std" else spec.fixed_dia_std
        combined, feats = [], {f: [] for f in FEATURES}
        n_ok = n_failed = 0
        for seed in spec.seeds():
            data, failed = labeled_dataset(net, spec.samples, dem, dia, seed)
            n_failed += failed
            n_ok += len(data)
            if not len(data):
                continue
            rep = evaluate(model, net, data)
            combined.append(rep.combined)
            for f in FEATURES:
                feats[f].append(rep.mean[f])
        pooled = {f: float(np.mean(v)) if v else float("nan") for f, v in feats.items()}
        rows.append([
            repr(float(std)),
            repr(float(np.mean(combined))) if combined else "nan",
            repr(float(np.std(combined))) if combined else "nan",
            repr(float(np.mean(list(pooled.values())))),
            *(repr(pooled[f]) for f in FEATURES),
            n_ok,
            n_failed,
        ])
        log.info("sweep %s=%s combined %s", spec.parameter, std, rows[-1][1])
    return rows


def write_sweep(rows: list[list], spec: SweepSpec, csv_path: str | os.PathLike, svg_path: str | os.PathLike):
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        w.writerows(rows)
    x = [float(r[0]) for r in rows]
    label = "demand noise std" if spec.parameter == "demand_std" else "diameter noise std (m)"
    line_plot_svg(svg_path, x, {"combined MAE": [float(r[1]) for r in rows]}, label, "combined normalised MAE",
                  errors={"combined MAE": [float(r[2]) for r in rows]},
                  data_header=SWEEP_COLUMNS, data_rows=rows)


# -- speed benchmark --------------------------------------------------------------------------

BENCH_COLUMNS = ("std", "n_samples", "oracle_seconds", "surrogate_seconds", "speedup_percent", "oracle_failures")


def _median_time(fn, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def environment() -> dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "cpu_count": str(os.cpu_count()),
        "system": platform.system(),
    }


def speedup_bench(model: SurrogateModel, net: NetworkModel, n: int, stds: Sequence[float] = DEMAND_GRID,
                  seed: int = 0, repeats: int = 5, warmup: int = 1, dia_std: float = 0.01,
                  batch_size: int = 32) -> list[list]:
    """Oracle vs surrogate wall-clock on identical batches, per demand std.

    The surrogate time covers normalisation, the forward pass and
    denormalisation; the oracle time covers one solve per scenario.
    """
    check_network(model, net)
    rows = []
    if n <= 0:
        return rows
    for std in stds:
        sset = datagen.generate(net, n, std, dia_std, seed)
        scenarios = list(sset)
        failures = len(solve_batch(net, scenarios).failures)
        t_oracle = _median_time(lambda: solve_batch(net, scenarios), repeats, warmup)
        t_sur = _median_time(lambda: predict(model, Dataset.build(net, scenarios), batch_size=batch_size),
                             repeats, warmup)
        rows.append([repr(float(std)), n, f"{t_oracle:.6f}", f"{t_sur:.6f}",
                     f"{100.0 * (t_oracle - t_sur) / t_sur:.2f}", failures])
        log.info("bench std=%s oracle %.3fs surrogate %.3fs", std, t_oracle, t_sur)
    return rows


def write_bench(rows: list[list], path: str | os.PathLike):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        w.writerows(rows)
