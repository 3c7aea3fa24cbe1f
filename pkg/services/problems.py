"""
Per-family glue between the sampler, the reference solvers and the model:
desk-scale problem settings, ground-truth solves, and the channel encoding the
operator sees.
"""
import logging
import math
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveFloat, PositiveInt, model_validator

from services.errors import ConfigError, ContractError
from services.grid_core import Field, GridSpec, interpolate
from services.sampler import PayoffSpec, PDEFamily, PDEInstance, boundary_trace
from services.solvers import (
    KS_DT_LIMIT,
    BSConfig,
    KSConfig,
    NLSConfig,
    NSConfig,
    PoissonConfig,
    solve_bs,
    solve_ks,
    solve_nls,
    solve_ns,
    solve_poisson,
)

logger = logging.getLogger(__name__)


class ParamFeature(BaseModel):
    """Scalar parameter to constant input channel: (t(v) - offset) / scale."""

    model_config = ConfigDict(frozen=True)

    transform: Literal["identity", "log10"] = "identity"
    offset: float
    scale: PositiveFloat

    def encode(self, value: float) -> float:
        v = math.log10(value) if self.transform == "log10" else value
        return (v - self.offset) / self.scale


class ProblemSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    pde: PDEFamily
    size: PositiveInt
    length: PositiveFloat
    horizon: Optional[PositiveFloat] = None
    solver_dt: Optional[PositiveFloat] = None
    param_name: Optional[str] = None
    param_range: Optional[Tuple[float, float]] = None
    param_stress: Tuple[float, ...] = ()
    feature: Optional[ParamFeature] = None
    rollout_multiples: Tuple[int, ...] = ()
    resolution_factor: PositiveInt = 2
    amplitude: PositiveFloat = 1.0
    input_decay: PositiveFloat = 3.0
    forcing_amplitude: float = 0.1
    coeff_amplitude: float = 0.5
    source_amplitude: float = 10.0
    boundary_amplitude: float = 0.5
    boundary_modes: Tuple[int, int] = (1, 2)
    shifted_modes: Tuple[int, int] = (4, 8)
    shifted_amplitude_factor: PositiveFloat = 2.0
    strike_range: Tuple[float, float] = (0.8, 1.2)
    rate: float = 0.05
    maturity: PositiveFloat = 1.0
    digital_mix: float = 0.05
    upper_boundary: Literal["linear", "discounted"] = "linear"

    @model_validator(mode="after")
    def _check(self):
        if (self.param_name is None) != (self.param_range is None):
            raise ValueError("param_name and param_range go together")
        if self.param_range is not None and self.param_range[0] > self.param_range[1]:
            raise ValueError(f"empty parameter range {self.param_range}")
        if self.pde == PDEFamily.BLACK_SCHOLES and self.length < 4 * self.strike_range[1]:
            raise ValueError("s_max must be at least four times the largest strike")
        if not 0.0 <= self.digital_mix <= 1.0:
            raise ValueError("digital_mix is a probability")
        if any(m < 1 for m in self.rollout_multiples):
            raise ValueError("rollout multiples must be >= 1")
        return self

    @property
    def time_dependent(self) -> bool:
        return self.horizon is not None

    @property
    def param_control(self) -> Optional[float]:
        """Training-range midpoint, the in-range control setting."""
        if self.param_range is None:
            return None
        return 0.5 * (self.param_range[0] + self.param_range[1])

    def grid(self) -> GridSpec:
        dims = 2 if self.pde in (PDEFamily.NS, PDEFamily.POISSON) else 1
        sizes, lengths = [self.size] * dims, [self.length] * dims
        if self.pde in (PDEFamily.POISSON, PDEFamily.BLACK_SCHOLES):
            return GridSpec.dirichlet(sizes, lengths)
        return GridSpec.periodic(sizes, lengths)


_DEFAULTS: Dict[PDEFamily, Dict[str, Any]] = {
    PDEFamily.NLS: dict(
        size=128, length=2 * math.pi, horizon=0.1, solver_dt=5e-4,
        param_name="kappa", param_range=(0.5, 1.0), param_stress=(1.5, 2.0, 2.5),
        feature=ParamFeature(offset=0.5, scale=0.5), rollout_multiples=(2,),
    ),
    PDEFamily.NS: dict(
        size=32, length=2 * math.pi, horizon=1.0, solver_dt=0.01, input_decay=2.5,
        param_name="nu", param_range=(1e-3, 1e-3), param_stress=(10 ** -3.5,),
        feature=ParamFeature(transform="log10", offset=-3.0, scale=0.5), rollout_multiples=(2, 3, 5),
    ),
    PDEFamily.KS: dict(
        size=128, length=22 * math.pi, horizon=1.0, solver_dt=0.05, rollout_multiples=(2,),
    ),
    PDEFamily.BLACK_SCHOLES: dict(
        size=128, length=5.0, solver_dt=2e-3,
        param_name="sigma", param_range=(0.1, 0.3), param_stress=(0.45, 0.6),
        feature=ParamFeature(offset=0.1, scale=0.2),
    ),
    PDEFamily.POISSON: dict(
        size=33, length=1.0,
        param_name="coeff_decay", param_range=(3.0, 3.0), param_stress=(2.25, 1.5),
    ),
}


def default_problem_settings(pde: PDEFamily) -> ProblemSettings:
    pde = PDEFamily(pde)
    return ProblemSettings(pde=pde, **_DEFAULTS[pde])


def problem_settings(pde: PDEFamily, overrides: Optional[Mapping[str, Any]] = None) -> ProblemSettings:
    base = default_problem_settings(pde).model_dump()
    try:
        return ProblemSettings.model_validate({**base, **dict(overrides or {})})
    except ValueError as e:
        raise ConfigError(f"invalid settings for {PDEFamily(pde).value}: {e}") from e


_STATE_INPUT = {
    PDEFamily.NLS: "u0",
    PDEFamily.NS: "omega0",
    PDEFamily.KS: "u0",
    PDEFamily.BLACK_SCHOLES: "payoff",
    PDEFamily.POISSON: "f",
}
_IN_CHANNELS = {
    PDEFamily.NLS: 3, PDEFamily.NS: 2, PDEFamily.KS: 1, PDEFamily.BLACK_SCHOLES: 3, PDEFamily.POISSON: 8,
}


def primary_input_name(pde: PDEFamily) -> str:
    """The input perturbed by the noise scenario; for time-dependent families also the evolving state."""
    return _STATE_INPUT[PDEFamily(pde)]


def perturbation_keeps_mean(pde: PDEFamily) -> bool:
    return PDEFamily(pde) in (PDEFamily.NS, PDEFamily.KS)


def in_channels(pde: PDEFamily) -> int:
    return _IN_CHANNELS[PDEFamily(pde)]


def out_channels(pde: PDEFamily) -> int:
    return 2 if PDEFamily(pde) == PDEFamily.NLS else 1


def to_real_channels(field: Field) -> Field:
    """Complex fields travel as (re, im) channel pairs."""
    if not np.iscomplexobj(field.values):
        return field
    parts = np.concatenate([field.values.real, field.values.imag], axis=0)
    return Field(grid=field.grid, values=parts)


def _steps_within(span: float, dt_max: float) -> int:
    return max(1, int(math.ceil(span / dt_max - 1e-9)))


def solve_trajectory(instance: PDEInstance, settings: ProblemSettings, steps: int) -> List[Field]:
    """Ground truth at horizon multiples 1..steps, in the model's real channel layout."""
    pde = instance.pde
    if not settings.time_dependent:
        if steps != 1:
            raise ContractError(f"{pde.value} is stationary; only a single solve exists")
        return [solve_instance(instance, settings)]

    grid = instance.grid
    horizon = settings.horizon
    state = instance.inputs[primary_input_name(pde)]
    if pde == PDEFamily.NLS:
        bound = grid.spacing[0] ** 2 / math.pi
        per = _steps_within(horizon, min(settings.solver_dt, bound))
        cfg = NLSConfig(kappa=instance.params["kappa"], t_final=steps * horizon, dt=horizon / per,
                        grid=grid, save_every=per)
        traj = solve_nls(cfg, state)
    elif pde == PDEFamily.NS:
        per = _steps_within(horizon, settings.solver_dt)
        cfg = NSConfig(nu=instance.params["nu"], forcing=instance.inputs["forcing"],
                       t_final=steps * horizon, dt=horizon / per, grid=grid, save_every=per)
        traj = solve_ns(cfg, state)
    else:
        per = _steps_within(horizon, min(settings.solver_dt, KS_DT_LIMIT))
        cfg = KSConfig(domain_length=grid.lengths[0], t_final=steps * horizon, dt=horizon / per,
                       grid=grid, save_every=per)
        traj = solve_ks(cfg, state)
    return [to_real_channels(f) for f in traj.fields[1:]]


def solve_instance(instance: PDEInstance, settings: ProblemSettings) -> Field:
    """Ground-truth target for one horizon (or the stationary solution)."""
    pde = instance.pde
    grid = instance.grid
    if settings.time_dependent:
        return solve_trajectory(instance, settings, 1)[0]
    if pde == PDEFamily.BLACK_SCHOLES:
        cfg = BSConfig(sigma=instance.params["sigma"], r=instance.params["r"], T=instance.params["T"],
                       s_max=grid.lengths[0], grid=grid,
                       dt=instance.params["T"] / _steps_within(instance.params["T"], settings.solver_dt),
                       upper_boundary=settings.upper_boundary)
        return solve_bs(cfg, instance.inputs["payoff"])
    if instance.boundary is None:
        raise ContractError("Poisson instance carries no boundary specification")
    cfg = PoissonConfig(grid=grid, coefficient=instance.inputs["a"], source=instance.inputs["f"],
                        boundary=boundary_trace(instance.boundary, grid))
    return solve_poisson(cfg)


def _constant(grid: GridSpec, value: float) -> np.ndarray:
    return np.full(grid.sizes, value, dtype=np.float64)


def encode_input(instance: PDEInstance, settings: ProblemSettings) -> Field:
    pde = instance.pde
    grid = instance.grid
    feature = settings.feature

    if pde == PDEFamily.NLS:
        u0 = instance.inputs["u0"].values[0]
        channels = [u0.real, u0.imag, _constant(grid, feature.encode(instance.params["kappa"]))]
    elif pde == PDEFamily.NS:
        channels = [instance.inputs["omega0"].values[0], _constant(grid, feature.encode(instance.params["nu"]))]
    elif pde == PDEFamily.KS:
        channels = [instance.inputs["u0"].values[0]]
    elif pde == PDEFamily.BLACK_SCHOLES:
        S = grid.coordinates(0)
        channels = [instance.inputs["payoff"].values[0],
                    _constant(grid, feature.encode(instance.params["sigma"])),
                    S / grid.lengths[0]]
    else:
        trace = boundary_trace(instance.boundary, grid)
        nx, ny = grid.sizes
        x, y = grid.mesh()
        channels = [
            instance.inputs["a"].values[0], instance.inputs["f"].values[0],
            np.repeat(trace.south[:, None], ny, axis=1), np.repeat(trace.north[:, None], ny, axis=1),
            np.repeat(trace.west[None, :], nx, axis=0), np.repeat(trace.east[None, :], nx, axis=0),
            x / grid.lengths[0], y / grid.lengths[1],
        ]
    return Field(grid=grid, values=np.stack(channels))


def advance(instance: PDEInstance, output: Field) -> PDEInstance:
    """Feed a one-step model output back as the next state."""
    pde = instance.pde
    if not output.values.shape[0] == out_channels(pde):
        raise ContractError(f"expected {out_channels(pde)} output channels, got {output.channels}")
    if pde == PDEFamily.NLS:
        state = Field.from_array(output.grid, output.values[0] + 1j * output.values[1])
    elif pde in (PDEFamily.NS, PDEFamily.KS):
        state = Field.from_array(output.grid, output.values[0])
    else:
        raise ContractError(f"{pde.value} has no time evolution to advance")
    return instance.with_input(primary_input_name(pde), state)


def refine_instance(instance: PDEInstance, factor: int) -> PDEInstance:
    """Interpolate every input function onto the grid refined by `factor`."""
    fine = instance.grid.refined(factor)
    logger.debug(f"Refining {instance.pde.value} instance from {instance.grid.sizes} to {fine.sizes}")
    inputs = {name: interpolate(f, fine) for name, f in instance.inputs.items()}
    if instance.pde == PDEFamily.BLACK_SCHOLES:
        # payoffs are re-evaluated exactly on the fine grid
        kind = "digital" if instance.params.get("digital") else "vanilla_call"
        spec = PayoffSpec(kind=kind, strike=instance.params["strike"])
        inputs["payoff"] = Field.from_array(fine, spec.values(fine.coordinates(0)))
    return instance.model_copy(update={"inputs": inputs})
