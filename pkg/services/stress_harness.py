"""
Stress scenarios against a frozen checkpoint.

Each scenario walks a grid of settings, samples fresh instances per setting,
solves them for ground truth and scores the model. The degradation factor of a
scenario is the worst setting error over the scenario's reference error.
Checkpoint bytes are digested before and after every scenario; a change aborts
the run.
"""
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveInt, model_validator

from services.errors import (
    ContractError,
    DegenerateNormError,
    NumericError,
    RecordConstructionError,
    ResolutionError,
    ScenarioMismatchError,
)
from services.fno import checkpoint_digest, forward_batch, load_checkpoint
from services.grid_core import Field, SpectralProfile, rel_l2_error, spectral_error_profile
from services.problems import (
    ProblemSettings,
    advance,
    encode_input,
    perturbation_keeps_mean,
    primary_input_name,
    refine_instance,
    solve_instance,
    solve_trajectory,
)
from services.sampler import IN_DIST, PDEFamily, PDEInstance, Regime, ScenarioKind, derive_seed, perturb_input, sample_instance

logger = logging.getLogger(__name__)

APPLICABILITY: Dict[PDEFamily, Tuple[ScenarioKind, ...]] = {
    PDEFamily.POISSON: (ScenarioKind.PARAM_SHIFT, ScenarioKind.BOUNDARY_SHIFT,
                        ScenarioKind.RESOLUTION_SHIFT, ScenarioKind.PERTURBATION),
    PDEFamily.NLS: (ScenarioKind.PARAM_SHIFT, ScenarioKind.RESOLUTION_SHIFT,
                    ScenarioKind.ROLLOUT, ScenarioKind.PERTURBATION),
    PDEFamily.NS: (ScenarioKind.PARAM_SHIFT, ScenarioKind.RESOLUTION_SHIFT,
                   ScenarioKind.ROLLOUT, ScenarioKind.PERTURBATION),
    PDEFamily.BLACK_SCHOLES: (ScenarioKind.PARAM_SHIFT, ScenarioKind.BOUNDARY_SHIFT,
                              ScenarioKind.RESOLUTION_SHIFT, ScenarioKind.PERTURBATION),
    PDEFamily.KS: (ScenarioKind.ROLLOUT, ScenarioKind.PERTURBATION),
}

DEFAULT_REL_AMPLITUDE = 0.02
SPECTRAL_BINS = 8


def is_applicable(pde: PDEFamily, kind: ScenarioKind) -> bool:
    return ScenarioKind(kind) in APPLICABILITY[PDEFamily(pde)]


def applicable_cells() -> List[Tuple[PDEFamily, ScenarioKind]]:
    return [(pde, kind) for pde in PDEFamily for kind in ScenarioKind if is_applicable(pde, kind)]


class StressScenario(BaseModel):
    """
    A scenario and its setting grid. `settings` holds parameter values,
    resolution factors, horizon multiples, boundary families or perturbation
    amplitudes depending on `kind`.
    """

    model_config = ConfigDict(frozen=True)

    kind: ScenarioKind
    settings: Tuple[Union[float, str], ...]
    n_instances: PositiveInt = 20
    n_draws: PositiveInt = 5

    @model_validator(mode="after")
    def _check(self):
        if not self.settings:
            raise ValueError("a scenario needs at least one setting")
        return self

    @classmethod
    def default(cls, pde: PDEFamily, kind: ScenarioKind, settings: ProblemSettings,
                n_instances: int = 20, n_draws: int = 5) -> "StressScenario":
        if not is_applicable(pde, kind):
            raise ScenarioMismatchError(f"{kind.value} does not apply to {PDEFamily(pde).value}")
        grid = {
            ScenarioKind.PARAM_SHIFT: settings.param_stress,
            ScenarioKind.BOUNDARY_SHIFT: ("shifted",),
            ScenarioKind.RESOLUTION_SHIFT: (settings.resolution_factor,),
            ScenarioKind.ROLLOUT: settings.rollout_multiples,
            ScenarioKind.PERTURBATION: (DEFAULT_REL_AMPLITUDE,),
        }[kind]
        return cls(kind=kind, settings=tuple(grid), n_instances=n_instances, n_draws=n_draws)


class SettingResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    setting_id: int
    setting_value: str
    error: Optional[float] = None
    failed: bool = False
    detail: str = ""
    n_instances: int = 0
    n_diverged: int = 0


class InstanceArtifact(BaseModel):
    """One persisted per-instance number; setting errors are recomputable from these."""

    model_config = ConfigDict(frozen=True)

    setting_id: int
    instance: int
    draw: int = -1
    quantity: str
    value: float


class DegradationRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    pde: PDEFamily
    scenario: ScenarioKind
    seed: int
    e_base: float
    e_stress_worst: float
    d: float
    settings: List[SettingResult]

    @model_validator(mode="after")
    def _check(self):
        if not (self.e_base > 0 and self.e_stress_worst > 0):
            raise ValueError("errors in a degradation record must be positive")
        if self.d != self.e_stress_worst / self.e_base:
            raise ValueError("d must equal e_stress_worst / e_base")
        return self


class RolloutCurve(BaseModel):
    model_config = ConfigDict(frozen=True)

    times: List[float]
    mean_errors: List[Optional[float]]  # None where every instance had diverged
    counts: List[int]


class ScenarioOutcome(BaseModel):
    model_config = ConfigDict(frozen=True)

    record: DegradationRecord
    artifacts: List[InstanceArtifact]
    profiles: List[SpectralProfile] = []
    curve: Optional[RolloutCurve] = None
    train_nyquist: Optional[float] = None


def _format_setting(value: Union[float, str]) -> str:
    return value if isinstance(value, str) else f"{value:g}"


def build_degradation_record(setting_errors: Sequence[Union[SettingResult, float]], e_base: float, *,
                             pde: PDEFamily, scenario: ScenarioKind, seed: int = 0) -> DegradationRecord:
    results = [
        s if isinstance(s, SettingResult) else SettingResult(setting_id=i, setting_value=str(i), error=float(s))
        for i, s in enumerate(setting_errors)
    ]
    usable = [s.error for s in results if not s.failed and s.error is not None]
    if not usable:
        raise RecordConstructionError(f"every setting of {ScenarioKind(scenario).value} failed for {PDEFamily(pde).value}")
    if not e_base > 0:
        raise RecordConstructionError(f"reference error must be positive, got {e_base}")
    worst = max(usable)
    if not worst > 0:
        raise RecordConstructionError("worst-case setting error is zero")
    return DegradationRecord(pde=pde, scenario=scenario, seed=seed, e_base=e_base,
                             e_stress_worst=worst, d=worst / e_base, settings=results)


def setting_errors_from_artifacts(artifacts: Sequence[InstanceArtifact], quantity: str = "error") -> Dict[int, float]:
    """Mean of the per-instance values of `quantity` for every setting."""
    grouped: Dict[int, List[float]] = {}
    for a in artifacts:
        if a.quantity == quantity:
            grouped.setdefault(a.setting_id, []).append(a.value)
    return {sid: float(np.mean(vals)) for sid, vals in sorted(grouped.items())}


class StressHarness:
    def __init__(self, checkpoint: Union[str, Path], settings: ProblemSettings, *,
                 model_seed: int, spectral_bins: int = SPECTRAL_BINS):
        self.checkpoint = Path(checkpoint)
        self.params, self.header = load_checkpoint(self.checkpoint)
        self.settings = settings
        self.pde = PDEFamily(self.header.pde)
        if self.pde != settings.pde:
            raise ContractError(f"checkpoint is for {self.pde.value}, settings for {settings.pde.value}")
        self.model_seed = model_seed
        self.spectral_bins = spectral_bins
        self._digest = checkpoint_digest(self.checkpoint)

    @contextmanager
    def _frozen_checkpoint(self, kind: ScenarioKind) -> Iterator[None]:
        if checkpoint_digest(self.checkpoint) != self._digest:
            raise ContractError(f"checkpoint {self.checkpoint} changed before {kind.value}")
        yield
        if checkpoint_digest(self.checkpoint) != self._digest:
            raise ContractError(f"checkpoint {self.checkpoint} changed during {kind.value}")

    def _seeds(self, kind: ScenarioKind, n: int) -> List[int]:
        return [derive_seed(self.model_seed, "stress", kind.value, i) for i in range(n)]

    def _require(self, kind: ScenarioKind) -> None:
        if not is_applicable(self.pde, kind):
            raise ScenarioMismatchError(f"{kind.value} does not apply to {self.pde.value}")

    def _predict(self, instance: PDEInstance) -> Optional[Field]:
        x = encode_input(instance, self.settings)
        out, _ = forward_batch(self.params, x.values[None])
        if not np.all(np.isfinite(out)):
            return None
        return Field(grid=x.grid, values=out[0])

    def _score(self, instance: PDEInstance, target: Field) -> float:
        pred = self._predict(instance)
        if pred is None:
            raise NumericError("model output is not finite")
        return rel_l2_error(pred, target)

    def _shifted_sweep(self, kind: ScenarioKind, regimes: Sequence[Regime], labels: Sequence[str],
                       n_instances: int) -> Tuple[List[SettingResult], List[InstanceArtifact]]:
        results, artifacts = [], []
        seeds = self._seeds(kind, n_instances)
        for sid, (regime, label) in enumerate(zip(regimes, labels)):
            errors: List[float] = []
            try:
                for i, seed in enumerate(seeds):
                    instance = sample_instance(self.pde, regime, seed, self.settings, self.model_seed)
                    err = self._score(instance, solve_instance(instance, self.settings))
                    errors.append(err)
                    artifacts.append(InstanceArtifact(setting_id=sid, instance=i, quantity="error", value=err))
            except NumericError as e:
                logger.warning(f"{self.pde.value} {kind.value} setting {label} failed and is excluded: {e}")
                artifacts = [a for a in artifacts if a.setting_id != sid]
                results.append(SettingResult(setting_id=sid, setting_value=label, failed=True, detail=str(e)))
                continue
            results.append(SettingResult(setting_id=sid, setting_value=label, error=float(np.mean(errors)),
                                         n_instances=len(errors)))
        return results, artifacts

    def run_param_shift(self, values: Sequence[float], n_instances: int = 20
                        ) -> Tuple[List[SettingResult], List[InstanceArtifact]]:
        self._require(ScenarioKind.PARAM_SHIFT)
        regimes = [Regime(kind=ScenarioKind.PARAM_SHIFT, value=float(v)) for v in values]
        return self._shifted_sweep(ScenarioKind.PARAM_SHIFT, regimes, [_format_setting(float(v)) for v in values],
                                   n_instances)

    def run_boundary_shift(self, families: Sequence[str] = ("shifted",), n_instances: int = 20
                           ) -> Tuple[List[SettingResult], List[InstanceArtifact]]:
        self._require(ScenarioKind.BOUNDARY_SHIFT)
        regimes = [Regime(kind=ScenarioKind.BOUNDARY_SHIFT, family=f) for f in families]
        return self._shifted_sweep(ScenarioKind.BOUNDARY_SHIFT, regimes, list(families), n_instances)

    def run_resolution_shift(self, factors: Sequence[int], n_instances: int = 20
                             ) -> Tuple[List[SettingResult], List[InstanceArtifact], List[SpectralProfile]]:
        self._require(ScenarioKind.RESOLUTION_SHIFT)
        train_grid = self.settings.grid()
        for factor in factors:
            if factor < 1 or (train_grid.is_periodic and factor & (factor - 1)):
                raise ResolutionError(f"refinement factor {factor} must be a power of two >= 1")

        results, artifacts, profiles = [], [], []
        seeds = self._seeds(ScenarioKind.RESOLUTION_SHIFT, n_instances)
        for sid, factor in enumerate(factors):
            errors: List[float] = []
            energies = []
            label = f"x{factor}"
            try:
                for i, seed in enumerate(seeds):
                    coarse = sample_instance(self.pde, IN_DIST, seed, self.settings, self.model_seed)
                    fine = refine_instance(coarse, factor) if factor != 1 else coarse
                    target = solve_instance(fine, self.settings)
                    pred = self._predict(fine)
                    if pred is None:
                        raise NumericError("model output is not finite")
                    err = rel_l2_error(pred, target)
                    errors.append(err)
                    artifacts.append(InstanceArtifact(setting_id=sid, instance=i, quantity="error", value=err))
                    if target.grid.is_periodic:
                        profile = spectral_error_profile(pred, target, self.spectral_bins)
                        if not profile.degenerate:
                            energies.append(profile.energies)
                            edges = profile.bin_edges
            except NumericError as e:
                logger.warning(f"{self.pde.value} resolution setting {label} failed and is excluded: {e}")
                artifacts = [a for a in artifacts if a.setting_id != sid]
                results.append(SettingResult(setting_id=sid, setting_value=label, failed=True, detail=str(e)))
                continue
            results.append(SettingResult(setting_id=sid, setting_value=label, error=float(np.mean(errors)),
                                         n_instances=len(errors)))
            if energies:
                profiles.append(SpectralProfile(bin_edges=edges, energies=tuple(np.mean(energies, axis=0))))
        return results, artifacts, profiles

    def run_rollout(self, multiples: Sequence[int], n_instances: int = 20
                    ) -> Tuple[List[SettingResult], List[InstanceArtifact], RolloutCurve]:
        self._require(ScenarioKind.ROLLOUT)
        horizon = max(multiples)
        per_step: List[List[float]] = [[] for _ in range(horizon)]
        diverged_at: List[int] = []
        artifacts: List[InstanceArtifact] = []

        for i, seed in enumerate(self._seeds(ScenarioKind.ROLLOUT, n_instances)):
            instance = sample_instance(self.pde, IN_DIST, seed, self.settings, self.model_seed)
            try:
                truth = solve_trajectory(instance, self.settings, horizon)
            except NumericError as e:
                logger.warning(f"{self.pde.value} rollout instance {i} skipped, reference solve failed: {e}")
                continue
            state = instance
            for step in range(1, horizon + 1):
                pred = self._predict(state)
                if pred is None:
                    logger.warning(f"{self.pde.value} rollout instance {i} diverged at horizon {step}")
                    diverged_at.append(step)
                    artifacts.append(InstanceArtifact(setting_id=-1, instance=i, quantity="diverged", value=step))
                    break
                err = rel_l2_error(pred, truth[step - 1])
                per_step[step - 1].append(err)
                artifacts.append(InstanceArtifact(setting_id=-1, instance=i, draw=step, quantity="step_error", value=err))
                state = advance(state, pred)

        if not per_step[0]:
            raise RecordConstructionError(f"no {self.pde.value} rollout produced a one-step error")
        curve = RolloutCurve(times=[k * self.settings.horizon for k in range(1, horizon + 1)],
                             mean_errors=[float(np.mean(e)) if e else None for e in per_step],
                             counts=[len(e) for e in per_step])
        results = []
        for sid, m in enumerate(multiples):
            errors = per_step[m - 1]
            n_div = sum(1 for s in diverged_at if s <= m)
            if not errors:
                results.append(SettingResult(setting_id=sid, setting_value=str(m), failed=True,
                                             detail="all instances diverged", n_diverged=n_div))
                continue
            results.append(SettingResult(setting_id=sid, setting_value=str(m), error=float(np.mean(errors)),
                                         n_instances=len(errors), n_diverged=n_div))
            artifacts += [a.model_copy(update={"setting_id": sid, "quantity": "error"})
                          for a in artifacts if a.quantity == "step_error" and a.draw == m]
        return results, artifacts, curve

    def run_perturbation(self, rel_amplitude: float = DEFAULT_REL_AMPLITUDE, n_draws: int = 5,
                         n_instances: int = 20) -> Tuple[float, List[float], List[InstanceArtifact]]:
        """Returns the mean unperturbed error, the per-draw ratios and the artifacts."""
        self._require(ScenarioKind.PERTURBATION)
        name = primary_input_name(self.pde)
        keep_mean = perturbation_keeps_mean(self.pde)
        references, ratios, artifacts = [], [], []

        for i, seed in enumerate(self._seeds(ScenarioKind.PERTURBATION, n_instances)):
            instance = sample_instance(self.pde, IN_DIST, seed, self.settings, self.model_seed)
            e0 = self._score(instance, solve_instance(instance, self.settings))
            if e0 == 0.0:
                logger.warning(f"{self.pde.value} perturbation instance {i} skipped: unperturbed error is zero")
                continue
            references.append(e0)
            artifacts.append(InstanceArtifact(setting_id=0, instance=i, quantity="reference", value=e0))
            for d in range(n_draws):
                noisy = perturb_input(instance.inputs[name], rel_amplitude,
                                      derive_seed(seed, "perturb", d), zero_mean=keep_mean)
                perturbed = instance.with_input(name, noisy)
                ratio = self._score(perturbed, solve_instance(perturbed, self.settings)) / e0
                ratios.append(ratio)
                artifacts.append(InstanceArtifact(setting_id=0, instance=i, draw=d, quantity="ratio", value=ratio))
        if not ratios:
            raise DegenerateNormError(f"no usable {self.pde.value} perturbation instance")
        return float(np.mean(references)), ratios, artifacts

    def run_scenario(self, scenario: StressScenario, e_base: float) -> ScenarioOutcome:
        """Run one scenario and build its degradation record.

        Parameter, boundary and resolution shifts are measured against the
        model's baseline test error; rollouts against their own one-step error
        and perturbations against the unperturbed error.
        """
        kind = scenario.kind
        self._require(kind)
        profiles: List[SpectralProfile] = []
        curve = None
        reference = e_base
        n = scenario.n_instances

        with self._frozen_checkpoint(kind):
            if kind == ScenarioKind.PARAM_SHIFT:
                results, artifacts = self.run_param_shift([float(v) for v in scenario.settings], n)
            elif kind == ScenarioKind.BOUNDARY_SHIFT:
                results, artifacts = self.run_boundary_shift([str(v) for v in scenario.settings], n)
            elif kind == ScenarioKind.RESOLUTION_SHIFT:
                results, artifacts, profiles = self.run_resolution_shift([int(v) for v in scenario.settings], n)
            elif kind == ScenarioKind.ROLLOUT:
                results, artifacts, curve = self.run_rollout([int(v) for v in scenario.settings], n)
                reference = curve.mean_errors[0]
            else:
                results, artifacts = [], []
                unperturbed = None
                for sid, amplitude in enumerate(scenario.settings):
                    label = _format_setting(float(amplitude))
                    try:
                        ref, ratios, arts = self.run_perturbation(float(amplitude), scenario.n_draws, n)
                    except NumericError as e:
                        logger.warning(f"{self.pde.value} perturbation setting {label} failed and is excluded: {e}")
                        results.append(SettingResult(setting_id=sid, setting_value=label, failed=True, detail=str(e)))
                        continue
                    # amplitudes share the instances and their unperturbed reference
                    if unperturbed is None:
                        unperturbed = ref
                    artifacts += [a.model_copy(update={"setting_id": sid}) for a in arts]
                    results.append(SettingResult(setting_id=sid, setting_value=label,
                                                 error=unperturbed * float(np.mean(ratios)), n_instances=len(ratios)))
                if unperturbed is not None:
                    reference = unperturbed

        record = build_degradation_record(results, reference, pde=self.pde, scenario=kind, seed=self.model_seed)
        logger.info(f"{self.pde.value} {kind.value} seed {self.model_seed}: D = {record.d:.3f} "
                    f"(worst {record.e_stress_worst:.4e} / reference {record.e_base:.4e})")
        train_nyquist = float(max(self.settings.grid().nyquist)) if profiles else None
        return ScenarioOutcome(record=record, artifacts=artifacts, profiles=profiles, curve=curve,
                               train_nyquist=train_nyquist)
