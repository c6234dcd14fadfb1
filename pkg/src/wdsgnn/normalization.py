"""Per-scenario scaling that keeps the hydraulic equations invariant.

Demands and flows are divided by the total junction demand ``d_sum``; pipe
resistances by ``r_fac = 3 * std(r) / tau``. Heads then scale by
``d_sum**x * r_fac`` and pump curves follow so every head-loss relation holds
unchanged in normalised units.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .network import HW_EXPONENT, HydraulicProblem, HydraulicState, NetworkModel, Scenario

TAU = 1000.0


class DegenerateScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizationContext:
    d_sum: float
    r_fac: float
    tau: float = TAU
    x: float = HW_EXPONENT
    r_fallback: bool = False  # all resistances equal, r_fac = r / tau

    def __post_init__(self):
        if not (self.d_sum > 0 and self.r_fac > 0):
            raise DegenerateScenarioError(f"invalid context d_sum={self.d_sum!r} r_fac={self.r_fac!r}")

    @property
    def head_scale(self) -> float:
        return self.d_sum**self.x * self.r_fac

    def to_meta(self, prefix: str = "norm.") -> dict[str, str]:
        return {
            f"{prefix}d_sum": repr(self.d_sum),
            f"{prefix}r_fac": repr(self.r_fac),
            f"{prefix}tau": repr(self.tau),
            f"{prefix}x": repr(self.x),
            f"{prefix}r_fallback": str(int(self.r_fallback)),
        }

    @classmethod
    def from_meta(cls, meta: dict, prefix: str = "norm.") -> "NormalizationContext":
        return cls(
            d_sum=float(meta[f"{prefix}d_sum"]),
            r_fac=float(meta[f"{prefix}r_fac"]),
            tau=float(meta.get(f"{prefix}tau", TAU)),
            x=float(meta.get(f"{prefix}x", HW_EXPONENT)),
            r_fallback=bool(int(meta.get(f"{prefix}r_fallback", "0"))),
        )


IDENTITY = NormalizationContext(1.0, 1.0)


def context_for(net: NetworkModel, prob: HydraulicProblem, tau: float = TAU) -> NormalizationContext:
    d_sum = float(prob.demands[net.junction_idx].sum())
    if not d_sum > 0:
        raise DegenerateScenarioError("scenario has no positive junction demand")
    if prob.r.size == 0:
        raise DegenerateScenarioError("network has no pipes")
    sigma = float(np.std(prob.r))
    # relative threshold: identical pipes give a std of pure round-off
    if sigma <= 1e-12 * float(np.abs(prob.r).max()):
        return NormalizationContext(d_sum, float(prob.r[0]) / tau, tau, r_fallback=True)
    return NormalizationContext(d_sum, 3.0 * sigma / tau, tau)


def normalize_problem(prob: HydraulicProblem, ctx: NormalizationContext) -> HydraulicProblem:
    D, R, x = ctx.d_sum, ctx.r_fac, ctx.x
    hs = ctx.head_scale
    return replace(
        prob,
        demands=prob.demands / D,
        heads=prob.heads / hs,
        r=prob.r / R,
        pump_shutoff=prob.pump_shutoff / hs,
        pump_coeff=prob.pump_coeff * D ** (prob.pump_exponent - x) / R,
        prv_setting=prob.prv_setting / hs,
    )


def normalize(net: NetworkModel, scenario: Scenario | None = None,
              tau: float = TAU) -> tuple[HydraulicProblem, NormalizationContext]:
    """Normalised problem for one scenario, and the context that undoes it."""
    prob = net.problem(scenario)
    ctx = context_for(net, prob, tau)
    return normalize_problem(prob, ctx), ctx


def denormalize(state: HydraulicState, ctx: NormalizationContext) -> HydraulicState:
    return HydraulicState(
        heads=state.heads * ctx.head_scale,
        flows=state.flows * ctx.d_sum,
        demands=state.demands * ctx.d_sum,
    )


def normalize_state(state: HydraulicState, ctx: NormalizationContext) -> HydraulicState:
    return HydraulicState(
        heads=state.heads / ctx.head_scale,
        flows=state.flows / ctx.d_sum,
        demands=state.demands / ctx.d_sum,
    )
