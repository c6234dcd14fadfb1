"""Command-line interface to the water network surrogate toolkit.

Every subcommand accepts ``--net`` (bundled network name or INP path),
``--config`` (``key = value`` file), ``--out`` (output directory) and
``--seed``. Exit status is 0 on success, 1 on invalid input and 2 on a
numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datagen
from .evaluation import (SweepSpec, check_network, environment, evaluate, predict, robustness_sweep, speedup_bench, write_bench,
                         write_sweep)
from .gnn import SurrogateModel
from .inp import (ScenarioSet, network_path, read_inp, read_scenarios, read_state, write_inp, write_meta, write_scenarios,
                  write_state)
from .network import HydraulicState
from .normalization import context_for, denormalize, normalize_problem, normalize_state
from .oracle import SolveInfo, SolverError, solve
from .physics import PhysicsInputs, physics_step
from .training import ConfigError, Dataset, TrainConfig, train

log = logging.getLogger("wdsgnn")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class NumericFailure(RuntimeError):
    pass


@dataclass
class RunConfig:
    """Settings outside training proper; shares the config file with :class:`TrainConfig`."""

    n_samples: int = 600
    demand_std: float = 0.1
    dia_std: float = 0.01
    split: str = "60:20:20"
    sweep_parameter: str = "demand_std"
    sweep_samples: int = 1000
    sweep_repeats: int = 10
    bench_samples: int = 100
    bench_stds: str = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"
    bench_repeats: int = 5

    def ratios(self) -> tuple[float, float, float]:
        parts = self.split.split(":")
        if len(parts) != 3:
            raise ConfigError(f"split must look like 60:20:20, got {self.split!r}")
        return tuple(float(p) for p in parts)  # type: ignore[return-value]

    def stds(self) -> list[float]:
        return [float(s) for s in self.bench_stds.split(",") if s.strip()]


def load_config(path: str | None, seed: int | None) -> tuple[TrainConfig, RunConfig]:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    run_fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    train_lines, run_values = [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = (s.strip() for s in line.partition("="))
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        if key in train_keys:
            train_lines.append(line)
        elif key in run_fields:
            kind = str(run_fields[key].type)
            try:
                run_values[key] = int(val) if kind == "int" else float(val) if kind == "float" else val
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: cannot parse {val!r} for {key}") from None
        else:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
    return TrainConfig.from_text("\n".join(train_lines), seed=seed), RunConfig(**run_values)


# -- helpers -----------------------------------------------------------------------------


def _load_net(args):
    net, warnings = read_inp(network_path(args.net))
    for w in warnings:
        log.warning(w)
    return net, warnings


def _write_kv_csv(path: Path, rows: dict):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "value"])
        for k, v in rows.items():
            w.writerow([k, v])


def _load_labeled(net, data_dir: Path) -> tuple[ScenarioSet, list[int], list[HydraulicState], dict[str, np.ndarray]]:
    sset = read_scenarios(data_dir / "scenarios.csv", net)
    ids, states = read_state(data_dir / "states.csv", net)
    splits: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    with open(data_dir / "split.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            splits[row["split"]].append(int(row["sample_id"]))
    return sset, ids, states, {k: np.array(v, dtype=np.int64) for k, v in splits.items()}


def _provenance(key: str, path) -> dict:
    """File name and content hash; kept location-free so reruns elsewhere match byte for byte."""
    p = Path(path)
    return {key: p.name, f"{key}_sha256": hashlib.sha256(p.read_bytes()).hexdigest()}


def _dataset(net, sset: ScenarioSet, ids: list[int], states: list[HydraulicState], idx) -> Dataset:
    by_id = dict(zip(ids, states))
    keep = [int(i) for i in idx if int(i) in by_id]
    return Dataset.build(net, [sset[i] for i in keep], [by_id[i] for i in keep], keep)


def _make_data(net, run: RunConfig, seed: int, out: Path | None):
    sset = datagen.generate(net, run.n_samples, run.demand_std, run.dia_std, seed)
    lab = datagen.label(net, sset)
    tr, va, te = datagen.split(len(sset), run.ratios(), seed)
    if out is not None:
        write_scenarios(sset, out / "scenarios.csv", net)
        write_state(lab.states, out / "states.csv", net, meta=dict(sset.meta, excluded=lab.excluded),
                    sample_ids=lab.ok)
        with open(out / "split.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "split"])
            for name, idx in (("train", tr), ("val", va), ("test", te)):
                for i in idx:
                    w.writerow([int(i), name])
        with open(out / "failures.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "reason"])
            for i, why in sorted(lab.failures.items()):
                w.writerow([i, why])
    return sset, lab.ok, lab.states, {"train": tr, "val": va, "test": te}


# -- subcommands ----------------------------------------------------------------------------


def cmd_parse(args, tcfg, run):
    net, warnings = _load_net(args)
    summary = dict(net.summary(), hash=net.hash, **{f"meta.{k}": v for k, v in sorted(net.metadata.items())})
    _write_kv_csv(args.out / "network.csv", summary)
    (args.out / "network.inp").write_text(write_inp(net), encoding="utf-8")
    write_meta(args.out / "network.csv.meta", {"source": args.net, "warnings": len(warnings),
                                                **{f"warning.{i}": w for i, w in enumerate(warnings)}})
    print(f"{net.name}: {summary['junctions']} junctions, {summary['reservoirs']} reservoirs, "
          f"{summary['pipes']} pipes, {summary['pumps']} pumps, {summary['prvs']} PRVs, diameter {net.graph_diameter}")


def cmd_simulate(args, tcfg, run):
    net, _ = _load_net(args)
    if args.scenarios:
        sset = read_scenarios(args.scenarios, net)
        scenarios = list(sset)
    else:
        scenarios = [net.base_scenario()]
    states, infos = [], []
    for sc in scenarios:
        info = SolveInfo()
        states.append(solve(net, sc, info=info))
        infos.append(info)
    meta = {"network": net.name, "iterations": ";".join(str(i.iterations) for i in infos)}
    write_state(states, args.out / "state.csv", net, meta=meta)
    print(f"solved {len(states)} scenario(s)")


def cmd_datagen(args, tcfg, run):
    net, _ = _load_net(args)
    sset, ok, states, splits = _make_data(net, run, args.seed, args.out)
    print(f"{len(sset)} samples, {len(sset) - len(ok)} excluded; split "
          f"{len(splits['train'])}/{len(splits['val'])}/{len(splits['test'])}")


def cmd_train(args, tcfg, run):
    net, _ = _load_net(args)
    if args.data:
        sset, ids, states, splits = _load_labeled(net, Path(args.data))
    else:
        sset, ids, states, splits = _make_data(net, run, args.seed, None)
    dtr = _dataset(net, sset, ids, states, splits["train"])
    dva = _dataset(net, sset, ids, states, splits["val"])
    (args.out / "config.txt").write_text(tcfg.to_text(), encoding="utf-8")
    model, report = train(net, dtr, dva, tcfg)
    model.save(args.out / "model.ckpt")
    report.write_csv(args.out / "train_report.csv")
    report.write_timing(args.out / "train_timing.csv")
    if report.status != "ok":
        raise NumericFailure(report.status)
    print(f"trained {len(report.records)} epochs; best validation loss {report.best_val_loss:.6g} "
          f"at epoch {report.best_epoch}")


def cmd_reconstruct(args, tcfg, run):
    """Run the physics step on the flows of a state file and write the reconstructed states."""
    net, _ = _load_net(args)
    ids, states = read_state(args.state, net)
    out = []
    for st in states:
        raw = net.problem(dataclasses.replace(net.base_scenario(), demands=np.where(net.reservoir_mask, 0, st.demands)))
        ctx = context_for(net, raw)
        prob = normalize_problem(raw, ctx)
        q = normalize_state(st, ctx).directed_flows()[None, :]
        res = physics_step(net, PhysicsInputs.from_problems(net, [prob], q, tcfg.zeta), tcfg.max_sweeps)
        L = net.n_links
        rec = HydraulicState(res.h_tilde.value[0], res.q_tilde.value[0, :L], res.d_tilde.value[0])
        out.append(denormalize(rec, ctx))
    write_state(out, args.out / "reconstructed.csv", net, meta=_provenance("source", args.state), sample_ids=ids)
    print(f"reconstructed {len(out)} state(s)")


def _model(args, net):
    if not args.model:
        raise ConfigError("--model is required")
    model = SurrogateModel.load(args.model)
    check_network(model, net)
    return model


def cmd_eval(args, tcfg, run):
    net, _ = _load_net(args)
    model = _model(args, net)
    if args.data:
        sset, ids, states, splits = _load_labeled(net, Path(args.data))
    else:
        sset, ids, states, splits = _make_data(net, run, args.seed, None)
    test = _dataset(net, sset, ids, states, splits["test"])
    report = evaluate(model, net, test)
    report.write_csv(args.out / "metrics.csv")
    write_state(predict(model, test), args.out / "predicted.csv", net, meta=_provenance("model", args.model),
                sample_ids=test.sample_ids)
    for row in report.rows():
        print(",".join(row))


def cmd_sweep(args, tcfg, run):
    net, _ = _load_net(args)
    model = _model(args, net)
    spec = SweepSpec.for_parameter(run.sweep_parameter, samples=run.sweep_samples, repeats=run.sweep_repeats,
                                   seed=args.seed, fixed_demand_std=run.demand_std, fixed_dia_std=run.dia_std)
    rows = robustness_sweep(model, net, spec)
    write_sweep(rows, spec, args.out / "sweep.csv", args.out / "sweep.svg")
    write_meta(args.out / "sweep.csv.meta", {"parameter": spec.parameter, "samples": spec.samples,
                                             "repeats": spec.repeats, "seeds": ";".join(map(str, spec.seeds()))})
    print(f"wrote {len(rows)} sweep points")


def cmd_bench(args, tcfg, run):
    net, _ = _load_net(args)
    model = _model(args, net)
    rows = speedup_bench(model, net, run.bench_samples, run.stds(), args.seed, run.bench_repeats)
    write_bench(rows, args.out / "bench.csv")
    write_meta(args.out / "bench.csv.meta", dict(environment(), network=net.name, repeats=run.bench_repeats))
    for r in rows:
        print(",".join(map(str, r)))


COMMANDS = {
    "parse": (cmd_parse, "parse an INP file and write a summary and SI re-export"),
    "simulate": (cmd_simulate, "solve steady states with the reference solver"),
    "datagen": (cmd_datagen, "generate, label and split a scenario set"),
    "train": (cmd_train, "train the surrogate"),
    "reconstruct": (cmd_reconstruct, "run the physics step on the flows of a state file"),
    "eval": (cmd_eval, "evaluate a checkpoint on the test split"),
    "sweep": (cmd_sweep, "robustness sweep over demand or diameter noise"),
    "bench": (cmd_bench, "surrogate vs solver wall-clock"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wdsgnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--net", required=True, help="bundled network name or INP path")
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        if name in ("eval", "sweep", "bench"):
            p.add_argument("--model", help="checkpoint file")
        if name in ("train", "eval"):
            p.add_argument("--data", help="directory written by datagen (generated on the fly if omitted)")
        if name == "simulate":
            p.add_argument("--scenarios", help="scenario CSV (base demands if omitted)")
        if name == "reconstruct":
            p.add_argument("--state", required=True, help="state CSV whose flows are fed to the physics step")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed < 0 or args.seed >= 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INVALID
    try:
        tcfg, run = load_config(args.config, args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command][0](args, tcfg, run)
    except (SolverError, FloatingPointError, NumericFailure) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
