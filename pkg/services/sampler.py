"""
Seeded generation of PDE instances: in-distribution training inputs and the
shifted families used by the stress scenarios.

Every draw is a pure function of its seed. Sub-draws (real/imaginary part,
coefficient, source, forcing, ...) get their own child seeds through
`derive_seed`, so adding a draw to one family never moves another.
"""
import json
import logging
import zlib
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, NonNegativeFloat, PositiveFloat, model_validator

from services.errors import ContractError, DegenerateInputError, ScenarioMismatchError
from services.grid_core import Field, GridSpec, read_fields, weighted_norm, write_fields
from services.solvers import EdgeTrace

if TYPE_CHECKING:
    from services.problems import ProblemSettings

logger = logging.getLogger(__name__)

_SEED_MASK = 0xFFFFFFFFFFFFFFFF


class PDEFamily(str, Enum):
    NLS = "nls"
    POISSON = "poisson"
    NS = "ns"
    BLACK_SCHOLES = "black_scholes"
    KS = "ks"


class ScenarioKind(str, Enum):
    PARAM_SHIFT = "param_shift"
    BOUNDARY_SHIFT = "boundary_shift"
    RESOLUTION_SHIFT = "resolution_shift"
    ROLLOUT = "rollout"
    PERTURBATION = "perturbation"


def derive_seed(*parts: Union[int, str]) -> int:
    """64-bit seed from a path of integers and tags; negative integers map to their two's complement."""
    entropy = [p & _SEED_MASK if isinstance(p, int) else zlib.crc32(p.encode("utf-8")) for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


# ---------- random fields ----------

class RandomFieldSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    grid: GridSpec
    spectrum_decay: PositiveFloat
    amplitude: NonNegativeFloat
    seed: int
    zero_mean: bool = False


def sample_gaussian_field(spec: RandomFieldSpec) -> Field:
    """
    Real field whose Fourier coefficients have variance (1+|k|^2)^(-alpha),
    rescaled to RMS value `amplitude`.

    Dirichlet grids are drawn on the periodic extension of twice their length
    and cropped, so the two ends are not forced to agree.
    """
    grid = spec.grid
    if spec.amplitude == 0.0:
        return Field.zeros(grid)

    ext_sizes, k2 = [], 0.0
    for axis, (n, h) in enumerate(zip(grid.sizes, grid.spacing)):
        n_ext = n if grid.is_periodic else 2 * (n - 1)
        k = 2 * np.pi * np.fft.fftfreq(n_ext, d=h)
        shape = [1] * grid.dims
        shape[axis] = n_ext
        k2 = k2 + k.reshape(shape) ** 2
        ext_sizes.append(n_ext)

    rng = np.random.default_rng(spec.seed)
    white = rng.standard_normal(tuple(ext_sizes))
    coeffs = np.fft.fftn(white) * np.sqrt((1.0 + k2) ** (-spec.spectrum_decay))
    if spec.zero_mean:
        coeffs.flat[0] = 0.0
    values = np.fft.ifftn(coeffs).real[tuple(slice(0, n) for n in grid.sizes)]
    if spec.zero_mean:
        values = values - values.mean()

    rms = float(np.sqrt(np.mean(values ** 2)))
    if rms == 0.0:
        raise DegenerateInputError("random field draw has zero energy")
    return Field.from_array(grid, values * (spec.amplitude / rms))


def ns_forcing(grid: GridSpec, model_seed: int, amplitude: float) -> Field:
    """Smooth forcing held fixed for every instance of one model seed."""
    return sample_gaussian_field(RandomFieldSpec(
        grid=grid, spectrum_decay=4.0, amplitude=amplitude,
        seed=derive_seed(model_seed, "ns", "forcing"), zero_mean=True))


# ---------- payoffs and boundary traces ----------

class PayoffSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["vanilla_call", "digital"]
    strike: PositiveFloat
    mix_weight: float = 0.0

    def values(self, S: np.ndarray) -> np.ndarray:
        if self.kind == "digital":
            return (S > self.strike).astype(np.float64)
        return np.maximum(S - self.strike, 0.0)


class BoundarySpec(BaseModel):
    """
    Edge traces: a bilinear corner interpolant plus sine modes in
    [modes[0], modes[1]] on every edge. Sines vanish at both ends of an edge,
    so the traces meet at the corners.
    """

    model_config = ConfigDict(frozen=True)

    family: Literal["in_dist", "shifted"] = "in_dist"
    modes: Tuple[int, int] = (1, 2)
    amplitude: NonNegativeFloat = 0.5
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if not 1 <= self.modes[0] <= self.modes[1]:
            raise ValueError(f"invalid mode band {self.modes}")
        return self

    @property
    def mode_cutoff(self) -> int:
        return self.modes[1]


def boundary_trace(spec: BoundarySpec, grid: GridSpec) -> EdgeTrace:
    if grid.dims != 2:
        raise ContractError("boundary traces live on 2D grids")
    rng = np.random.default_rng(spec.seed)
    sw, se, nw, ne = rng.normal(0.0, spec.amplitude, 4) if spec.amplitude > 0 else (0.0,) * 4
    modes = np.arange(spec.modes[0], spec.modes[1] + 1)

    def edge(start: float, end: float, axis: int) -> np.ndarray:
        s = grid.coordinates(axis) / grid.lengths[axis]
        coeffs = rng.normal(0.0, spec.amplitude, modes.size) if spec.amplitude > 0 else np.zeros(modes.size)
        wiggle = np.sin(np.pi * np.outer(s, modes)) @ coeffs
        trace = start + (end - start) * s + wiggle
        trace[0], trace[-1] = start, end
        return trace

    return EdgeTrace(south=edge(sw, se, 0), north=edge(nw, ne, 0),
                     west=edge(sw, nw, 1), east=edge(se, ne, 1))


# ---------- instances ----------

class Regime(BaseModel):
    """Where an instance is drawn from: training distribution or a shifted family."""

    model_config = ConfigDict(frozen=True)

    kind: Optional[ScenarioKind] = None
    value: Optional[float] = None
    family: Literal["in_dist", "shifted"] = "in_dist"

    @property
    def tag(self) -> str:
        if self.kind is None:
            return "in_dist"
        if self.kind == ScenarioKind.BOUNDARY_SHIFT:
            return f"{self.kind.value}:{self.family}"
        return f"{self.kind.value}:{self.value:g}"


IN_DIST = Regime()


class PDEInstance(BaseModel):
    """One solvable problem: family, scalar parameters and input functions."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    pde: PDEFamily
    seed: int
    regime: Regime = IN_DIST
    params: Dict[str, float]
    inputs: Dict[str, Field]
    boundary: Optional[BoundarySpec] = None

    @property
    def grid(self) -> GridSpec:
        return next(iter(self.inputs.values())).grid

    def with_input(self, name: str, field: Field) -> "PDEInstance":
        if name not in self.inputs:
            raise ContractError(f"{self.pde.value} instance has no input {name!r}")
        return self.model_copy(update={"inputs": {**self.inputs, name: field}})


def _check_regime(pde: PDEFamily, regime: Regime, settings: "ProblemSettings") -> None:
    if regime.kind is None:
        return
    if regime.kind == ScenarioKind.PARAM_SHIFT:
        if settings.param_name is None:
            raise ScenarioMismatchError(f"{pde.value} has no scalar parameter to shift")
        if regime.value is None:
            raise ScenarioMismatchError("a parameter shift needs a value")
        return
    if regime.kind == ScenarioKind.BOUNDARY_SHIFT:
        if pde not in (PDEFamily.POISSON, PDEFamily.BLACK_SCHOLES):
            raise ScenarioMismatchError(f"{pde.value} has no boundary or payoff family to shift")
        return
    raise ScenarioMismatchError(f"instances are not sampled for a {regime.kind.value} regime")


def _parameter(regime: Regime, settings: "ProblemSettings", rng: np.random.Generator) -> float:
    if regime.kind == ScenarioKind.PARAM_SHIFT:
        return float(regime.value)
    lo, hi = settings.param_range
    return float(rng.uniform(lo, hi))


def sample_instance(pde: PDEFamily, regime: Regime, seed: int,
                    settings: Optional["ProblemSettings"] = None, model_seed: int = 0) -> PDEInstance:
    if settings is None:
        from services.problems import default_problem_settings
        settings = default_problem_settings(pde)
    pde = PDEFamily(pde)
    _check_regime(pde, regime, settings)
    rng = np.random.default_rng(derive_seed(seed, pde.value, "params"))

    def grf(grid: GridSpec, decay: float, amplitude: float, tag: str, zero_mean: bool = False) -> Field:
        return sample_gaussian_field(RandomFieldSpec(
            grid=grid, spectrum_decay=decay, amplitude=amplitude,
            seed=derive_seed(seed, pde.value, tag), zero_mean=zero_mean))

    n, L = settings.size, settings.length
    params: Dict[str, float] = {}
    boundary = None

    if pde == PDEFamily.NLS:
        grid = GridSpec.periodic([n], [L])
        params["kappa"] = _parameter(regime, settings, rng)
        part = settings.amplitude / np.sqrt(2.0)
        re = grf(grid, settings.input_decay, part, "re").values[0]
        im = grf(grid, settings.input_decay, part, "im").values[0]
        inputs = {"u0": Field.from_array(grid, re + 1j * im)}
    elif pde == PDEFamily.NS:
        grid = GridSpec.periodic([n, n], [L, L])
        params["nu"] = _parameter(regime, settings, rng)
        inputs = {
            "omega0": grf(grid, settings.input_decay, settings.amplitude, "omega0", zero_mean=True),
            "forcing": ns_forcing(grid, model_seed, settings.forcing_amplitude),
        }
    elif pde == PDEFamily.KS:
        grid = GridSpec.periodic([n], [L])
        inputs = {"u0": grf(grid, settings.input_decay, settings.amplitude, "u0", zero_mean=True)}
    elif pde == PDEFamily.BLACK_SCHOLES:
        grid = GridSpec.dirichlet([n], [L])
        params["sigma"] = _parameter(regime, settings, rng)
        strike = float(rng.uniform(*settings.strike_range))
        shifted = regime.kind == ScenarioKind.BOUNDARY_SHIFT and regime.family == "shifted"
        mix = 1.0 if shifted else settings.digital_mix
        payoff = PayoffSpec(kind="digital" if rng.random() < mix else "vanilla_call",
                            strike=strike, mix_weight=mix)
        params.update(strike=strike, r=settings.rate, T=settings.maturity,
                      digital=float(payoff.kind == "digital"))
        inputs = {"payoff": Field.from_array(grid, payoff.values(grid.coordinates(0)))}
    else:
        grid = GridSpec.dirichlet([n, n], [L, L])
        decay = _parameter(regime, settings, rng)
        params["coeff_decay"] = decay
        log_a = grf(grid, decay, settings.coeff_amplitude, "coefficient").values[0]
        inputs = {
            "a": Field.from_array(grid, np.exp(log_a)),
            "f": grf(grid, settings.input_decay, settings.source_amplitude, "source"),
        }
        shifted = regime.kind == ScenarioKind.BOUNDARY_SHIFT and regime.family == "shifted"
        boundary = BoundarySpec(
            family="shifted" if shifted else "in_dist",
            modes=settings.shifted_modes if shifted else settings.boundary_modes,
            amplitude=settings.boundary_amplitude * (settings.shifted_amplitude_factor if shifted else 1.0),
            seed=derive_seed(seed, pde.value, "boundary"),
        )

    return PDEInstance(pde=pde, seed=seed, regime=regime, params=params, inputs=inputs, boundary=boundary)


def perturb_input(f: Field, rel_amplitude: float, seed: int, zero_mean: bool = False) -> Field:
    """f + eta with white Gaussian eta scaled to rel_amplitude * ||f||."""
    if not 0.0 < rel_amplitude <= 0.1:
        raise ContractError(f"rel_amplitude must lie in (0, 0.1], got {rel_amplitude}")
    size = weighted_norm(f.values, f.grid)
    if size == 0.0:
        raise DegenerateInputError("cannot perturb a zero-norm input")

    rng = np.random.default_rng(seed)
    eta = rng.standard_normal(f.values.shape)
    if np.iscomplexobj(f.values):
        eta = eta + 1j * rng.standard_normal(f.values.shape)
    if zero_mean:
        axes = tuple(range(1, f.values.ndim))
        eta = eta - eta.mean(axis=axes, keepdims=True)
    eta *= rel_amplitude * size / weighted_norm(eta, f.grid)
    return f.with_values(f.values + eta)


# ---------- dataset manifests ----------

class ManifestEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int
    regime: Regime = IN_DIST
    params: Dict[str, float]
    input_names: List[str]
    inputs: str
    target: Optional[str] = None
    boundary: Optional[BoundarySpec] = None


class DatasetManifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    pde: PDEFamily
    model_seed: int
    split: str
    settings: Dict[str, object]
    entries: List[ManifestEntry]


def save_instance(instance: PDEInstance, directory: Union[str, Path], stem: str,
                  target: Optional[Field] = None) -> ManifestEntry:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = sorted(instance.inputs)
    write_fields(directory / f"{stem}.in.fld", [instance.inputs[k] for k in names])
    target_name = None
    if target is not None:
        target_name = f"{stem}.out.fld"
        write_fields(directory / target_name, [target])
    return ManifestEntry(seed=instance.seed, regime=instance.regime, params=instance.params,
                         input_names=names, inputs=f"{stem}.in.fld", target=target_name,
                         boundary=instance.boundary)


def load_instance(entry: ManifestEntry, directory: Union[str, Path], pde: PDEFamily) -> Tuple[PDEInstance, Optional[Field]]:
    directory = Path(directory)
    fields = read_fields(directory / entry.inputs)
    if len(fields) != len(entry.input_names):
        raise ContractError(f"{entry.inputs}: expected {len(entry.input_names)} records, found {len(fields)}")
    instance = PDEInstance(pde=pde, seed=entry.seed, regime=entry.regime, params=entry.params,
                           inputs=dict(zip(entry.input_names, fields)), boundary=entry.boundary)
    target = read_fields(directory / entry.target)[0] if entry.target else None
    return instance, target


def write_manifest(path: Union[str, Path], manifest: DatasetManifest) -> None:
    payload = manifest.model_dump(mode="json")
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote {manifest.split} manifest for {manifest.pde.value} seed {manifest.model_seed} "
                f"({len(manifest.entries)} entries) to {path}")


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    return DatasetManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))
