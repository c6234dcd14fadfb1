"""Two-phase unrolled training of the surrogate.

Phase one applies the learnable estimator alone for ``T`` iterations; phase
two alternates it with the physics step for the remaining ``K - T``. The loss
combines the estimator's demand error, the physics step's demand error and
the disagreement between the two flow estimates, and is differentiated
through the whole unroll.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .gnn import Features, SurrogateModel
from .network import HydraulicProblem, HydraulicState, NetworkModel, Scenario, phase_one_iterations
from .normalization import NormalizationContext, context_for, normalize_problem
from .physics import DEFAULT_ZETA, PhysicsInputs, physics_step

log = logging.getLogger(__name__)

# Published per-network settings: graph diameter, phase-one iterations T and
# the range of K. Keys are network names; bundled fixtures use their file stem.
REFERENCE_SETTINGS: dict[str, tuple[int, int, tuple[int, int]]] = {
    "Anytown": (5, 0, (5, 10)),
    "Hanoi": (13, 2, (10, 15)),
    "Pescara": (20, 3, (10, 15)),
    "L-Town Area C": (20, 3, (10, 15)),
    "ZJ": (24, 4, (10, 15)),
    "Modena": (38, 7, (12, 17)),
    "PA1": (55, 10, (15, 20)),
    "Balerma": (60, 11, (16, 21)),
    "L-Town Area A": (79, 15, (20, 25)),
    "L-Town": (79, 15, (20, 25)),
    "KL": (53, 10, (15, 20)),
}


class ConfigError(ValueError):
    pass


class TrainingInstabilityError(FloatingPointError):
    def __init__(self, message: str, iteration: int | None = None):
        self.iteration = iteration
        super().__init__(message)


@dataclass
class TrainConfig:
    epochs: int = 1500
    lr0: float = 1e-4
    lr_decay: float = 0.75
    lr_step: int = 150
    grad_clip_norm: float = 1e-5
    rho: float = 0.1
    delta: float = 0.1
    layers: int = 5
    latent: int = 128
    k_min: int | None = None  # None: per-network default
    k_max: int | None = None
    phase_one: int | None = None  # T; None: derived from the graph diameter
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_sweeps: int | None = None
    zeta: float = DEFAULT_ZETA

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr_step < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr_step >= 1 required")
        if self.k_min is not None and self.k_max is not None and self.k_min > self.k_max:
            raise ConfigError(f"k_min {self.k_min} exceeds k_max {self.k_max}")

    # -- text form ---------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if v is None else repr(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or key not in kinds:
                raise ConfigError(f"line {lineno}: unknown or malformed entry {raw.strip()!r}")
            values[key] = _parse_value(val, kinds[key], key)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | os.PathLike, **overrides) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), **overrides)

    # -- per-network resolution ----------------------------------------------

    def resolve(self, net: NetworkModel) -> tuple[int, tuple[int, int]]:
        """Phase-one length T and the K range used on ``net``."""
        T = self.phase_one if self.phase_one is not None else phase_one_iterations(net.graph_diameter, self.layers)
        ref = REFERENCE_SETTINGS.get(net.name)
        k_default = ref[2] if ref else (T + 5, T + 10)
        k_min = self.k_min if self.k_min is not None else k_default[0]
        k_max = self.k_max if self.k_max is not None else max(k_default[1], k_min)
        if not k_max > T:
            raise ConfigError(f"K range [{k_min}, {k_max}] leaves no physics iterations after T={T}")
        return T, (max(k_min, T + 1), k_max)


def _parse_value(val: str, kind: str, key: str):
    if val.lower() == "none":
        if "None" not in str(kind):
            raise ConfigError(f"{key} cannot be none")
        return None
    try:
        if "int" in str(kind):
            return int(val)
        return float(val)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r}") from None


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """lr0 * decay ** floor(epoch / step), with 0-based epochs."""
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_step)


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


class Adam:
    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- data ------------------------------------------------------------------------


@dataclass
class Dataset:
    """Normalised problems (and optionally raw true states) for a sample set."""

    net: NetworkModel
    problems: list[HydraulicProblem]
    contexts: list[NormalizationContext]
    states: list[HydraulicState] | None = None
    sample_ids: list[int] = field(default_factory=list)

    @classmethod
    def build(cls, net: NetworkModel, scenarios: Sequence[Scenario],
              states: Sequence[HydraulicState] | None = None, sample_ids: Sequence[int] | None = None) -> "Dataset":
        problems, contexts = [], []
        for sc in scenarios:
            raw = net.problem(sc)
            ctx = context_for(net, raw)
            problems.append(normalize_problem(raw, ctx))
            contexts.append(ctx)
        ids = list(sample_ids) if sample_ids is not None else list(range(len(problems)))
        return cls(net, problems, contexts, list(states) if states is not None else None, ids)

    def __len__(self):
        return len(self.problems)

    def inputs(self, idx: Sequence[int], zeta: float = DEFAULT_ZETA) -> PhysicsInputs:
        probs = [self.problems[i] for i in idx]
        return PhysicsInputs.from_problems(self.net, probs, None, zeta)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = list(idx)
        return Dataset(self.net, [self.problems[i] for i in idx], [self.contexts[i] for i in idx],
                       [self.states[i] for i in idx] if self.states is not None else None,
                       [self.sample_ids[i] for i in idx])


# -- forward and loss -----------------------------------------------------------------


@dataclass
class UnrollResult:
    q_hat: Tensor
    d_hat: Tensor
    h_tilde: Tensor | None
    d_tilde: Tensor | None
    q_tilde: Tensor | None
    sweeps: list[int] = field(default_factory=list)
    q2_history: list[np.ndarray] = field(default_factory=list)  # q2 fed to each f1 call


def _check(t: Tensor, what: str, it: int):
    if not np.all(np.isfinite(t.value)):
        raise TrainingInstabilityError(f"non-finite {what} at iteration {it}", it)


def two_phase_forward(model: SurrogateModel, net: NetworkModel, inputs: PhysicsInputs, K: int, T: int,
                      max_sweeps: int | None = None, estimator: Callable | None = None,
                      keep_history: bool = False) -> UnrollResult:
    """Run T estimator-only iterations, then K - T estimator + physics iterations.

    ``estimator`` replaces ``model.forward`` (used to plug in stubs).
    """
    if not (K > T >= 0):
        raise ValueError(f"need K > T >= 0, got K={K}, T={T}")
    f1 = estimator or model.forward
    feats = Features.initial(net, inputs.demands)
    out = None
    sweeps, history = [], []
    for it in range(K):
        if keep_history:
            history.append(np.array(ad.no_grad_value(feats.q2)))
        q_hat, d_hat = f1(net, feats)
        _check(q_hat, "estimated flow", it)
        if it < T:
            feats = Features(feats.d1, d_hat, feats.d3, q_hat, feats.q2)
            continue
        try:
            out = physics_step(net, replace(inputs, q_hat=q_hat), max_sweeps)
        except FloatingPointError as exc:
            raise TrainingInstabilityError(f"physics step failed at iteration {it}: {exc}", it) from exc
        _check(out.q_tilde, "physics flow", it)
        sweeps.append(out.sweeps)
        feats = Features(feats.d1, d_hat, feats.d3, q_hat, out.q_tilde)
    return UnrollResult(q_hat, d_hat, out.h_tilde, out.d_tilde, out.q_tilde, sweeps, history)


def loss(d_star, d_hat, d_tilde, q_hat, q_tilde, rho: float = 0.1, delta: float = 0.1,
         junctions: np.ndarray | None = None) -> Tensor:
    """Mean-L1 demand error + rho * physics demand error + delta * flow disagreement.

    Demand terms are restricted to ``junctions`` (node indices) when given.
    """
    d_star = np.asarray(d_star, dtype=float)
    if junctions is not None:
        sel = (slice(None), junctions) if d_star.ndim == 2 else junctions
        d_star = d_star[sel]
        d_hat = ad.gather(d_hat, junctions, axis=-1)
        d_tilde = ad.gather(d_tilde, junctions, axis=-1)
    total = ad.mean(ad.absolute(d_hat - d_star))
    if rho:
        total = total + rho * ad.mean(ad.absolute(d_tilde - d_star))
    if delta:
        total = total + delta * ad.mean(ad.absolute(ad._tensor(q_hat) - q_tilde))
    return total


def batch_loss(model: SurrogateModel, data: Dataset, idx: Sequence[int], K: int, T: int,
               cfg: TrainConfig) -> Tensor:
    inputs = data.inputs(idx, cfg.zeta)
    res = two_phase_forward(model, data.net, inputs, K, T, cfg.max_sweeps)
    return loss(inputs.demands, res.d_hat, res.d_tilde, res.q_hat, res.q_tilde, cfg.rho, cfg.delta,
                data.net.junction_idx)


def dataset_loss(model: SurrogateModel, data: Dataset, K: int, T: int, cfg: TrainConfig) -> float:
    """Sample-weighted mean loss over a whole set (no gradient tracking)."""
    if not len(data):
        return float("nan")
    acc = 0.0
    for s in range(0, len(data), cfg.batch_size):
        idx = list(range(s, min(s + cfg.batch_size, len(data))))
        acc += float(batch_loss(model, data, idx, K, T, cfg).value) * len(idx)
    return acc / len(data)


# -- training loop --------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    k_drawn: list[int]
    grad_norm_max: float
    seconds: float = 0.0


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    status: str = "ok"
    checkpoint: str | None = None
    T: int = 0
    k_range: tuple[int, int] = (0, 0)

    COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "k_drawn", "grad_norm_max")

    def write_csv(self, path: str | os.PathLike):
        """Deterministic columns only; wall-clock goes to :meth:`write_timing`."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr),
                            ";".join(map(str, r.k_drawn)), repr(r.grad_norm_max)])

    def write_timing(self, path: str | os.PathLike):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "seconds"))
            for r in self.records:
                w.writerow([r.epoch, f"{r.seconds:.3f}"])

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "TrainReport":
        rep = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                ks = [int(k) for k in row["k_drawn"].split(";") if k]
                rep.records.append(EpochRecord(int(row["epoch"]), float(row["train_loss"]), float(row["val_loss"]),
                                               float(row["lr"]), ks, float(row["grad_norm_max"])))
        for r in rep.records:  # same selection rule as train(): first strict improvement wins
            if r.val_loss < rep.best_val_loss:
                rep.best_val_loss, rep.best_epoch = r.val_loss, r.epoch
        return rep


def train(net: NetworkModel, train_data: Dataset, val_data: Dataset, cfg: TrainConfig,
          model: SurrogateModel | None = None,
          on_epoch: Callable[[EpochRecord, SurrogateModel], None] | None = None) -> tuple[SurrogateModel, TrainReport]:
    """Train and return the best-validation model with its report.

    On a numeric blow-up the loop stops, the report status says why, and the
    best model seen so far is returned.
    """
    if not len(train_data):
        raise ConfigError("empty training set")
    T, (k_min, k_max) = cfg.resolve(net)
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = SurrogateModel.initialize(cfg.latent, cfg.layers, seed=int(rng.integers(2**63)))
    model.meta.update(network_hash=net.hash, network=net.name, T=str(T), k_min=str(k_min), k_max=str(k_max),
                      tau=str(train_data.contexts[0].tau), x=str(train_data.contexts[0].x))
    params = model.parameters()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    report = TrainReport(T=T, k_range=(k_min, k_max))
    best = model.copy()
    n = len(train_data)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = learning_rate(cfg, epoch)
        order = rng.permutation(n)
        ks, acc, gmax = [], 0.0, 0.0
        try:
            for s in range(0, n, cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                K = int(rng.integers(k_min, k_max + 1))
                ks.append(K)
                with Tape() as tape:
                    value = batch_loss(model, train_data, idx, K, T, cfg)
                grads = tape.gradient(value, params)
                if not all(np.all(np.isfinite(g)) for g in grads):
                    raise TrainingInstabilityError(f"non-finite gradient in epoch {epoch}")
                grads, gnorm = clip_by_global_norm(grads, cfg.grad_clip_norm)
                gmax = max(gmax, gnorm)
                opt.step(grads, lr)
                acc += float(value.value) * len(idx)
            val = dataset_loss(model, val_data, k_max, T, cfg) if len(val_data) else float("nan")
            if not np.isfinite(val) and len(val_data):
                raise TrainingInstabilityError(f"non-finite validation loss in epoch {epoch}")
        except TrainingInstabilityError as exc:
            report.status = f"aborted: {exc}"
            log.error("training aborted: %s", exc)
            break
        rec = EpochRecord(epoch, acc / n, val, lr, ks, gmax, time.perf_counter() - t0)
        report.records.append(rec)
        if not len(val_data) or val < report.best_val_loss:
            report.best_val_loss, report.best_epoch = val, epoch
            best = model.copy()
        log.info("epoch %d train %.6g val %.6g lr %.3g (%.1fs)", epoch, rec.train_loss, val, lr, rec.seconds)
        if on_epoch:
            on_epoch(rec, model)
    best.meta["best_epoch"] = str(report.best_epoch)
    return best, report
