"""
Multi-seed aggregation of degradation factors and the derived figure data.
"""
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from services.errors import CompletenessError, ContractError, InsufficientSeedsError
from services.sampler import PDEFamily, ScenarioKind
from services.stress_harness import APPLICABILITY, DegradationRecord, RolloutCurve

logger = logging.getLogger(__name__)

Z_95 = 1.96


class SummaryStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    mean: float
    std: float
    ci_low: float
    ci_high: float
    n: int

    @model_validator(mode="after")
    def _check(self):
        if not self.ci_low <= self.mean <= self.ci_high:
            raise ValueError("confidence interval must contain the mean")
        return self


class CellSummary(BaseModel):
    """One row of the summary JSON: {pde, scenario, mean, std, ci_low, ci_high, n}."""

    model_config = ConfigDict(frozen=True)

    pde: PDEFamily
    scenario: ScenarioKind
    mean: float
    std: float
    ci_low: float
    ci_high: float
    n: int

    @property
    def stats(self) -> SummaryStats:
        return SummaryStats(mean=self.mean, std=self.std, ci_low=self.ci_low, ci_high=self.ci_high, n=self.n)


def summary_from_moments(mean: float, std: float, n: int) -> SummaryStats:
    """Normal-approximation 95% interval mean +/- 1.96 std / sqrt(n)."""
    if n < 2:
        raise InsufficientSeedsError(f"need at least 2 seeds, got {n}")
    half = Z_95 * std / math.sqrt(n)
    return SummaryStats(mean=mean, std=std, ci_low=mean - half, ci_high=mean + half, n=n)


def summarize(records: Sequence[Union[DegradationRecord, float]]) -> SummaryStats:
    """Stats of D over seeds; records of several (pde, scenario) cells are rejected."""
    values = []
    cells = set()
    for r in records:
        if isinstance(r, DegradationRecord):
            cells.add((r.pde, r.scenario))
            values.append(r.d)
        else:
            values.append(float(r))
    if len(cells) > 1:
        raise ContractError(f"records span several cells: {sorted((p.value, s.value) for p, s in cells)}")
    if len(values) < 2:
        raise InsufficientSeedsError(f"need at least 2 seeds, got {len(values)}")
    arr = np.sort(np.asarray(values, dtype=np.float64))
    return summary_from_moments(float(np.mean(arr)), float(np.std(arr, ddof=1)), arr.size)


def summarize_cells(records: Sequence[DegradationRecord]) -> List[CellSummary]:
    grouped: Dict[Tuple[PDEFamily, ScenarioKind], List[DegradationRecord]] = {}
    for r in records:
        grouped.setdefault((r.pde, r.scenario), []).append(r)
    out = []
    for (pde, scenario), group in sorted(grouped.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value)):
        try:
            s = summarize(group)
        except InsufficientSeedsError as e:
            logger.warning(f"{pde.value}/{scenario.value}: {e}; cell left out of the summary")
            continue
        out.append(CellSummary(pde=pde, scenario=scenario, **s.model_dump()))
    return out


class HeatmapMatrix(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    rows: List[PDEFamily]
    cols: List[ScenarioKind]
    values: np.ndarray
    mask: np.ndarray

    def cell(self, pde: PDEFamily, scenario: ScenarioKind) -> Optional[float]:
        i, j = self.rows.index(pde), self.cols.index(scenario)
        return None if self.mask[i, j] else float(self.values[i, j])


def heatmap_matrix(summaries: Sequence[CellSummary]) -> HeatmapMatrix:
    """
    Mean D per (pde, scenario) over the families and scenarios present.
    Masked entries are the inapplicable pairs; an applicable pair without a
    summary is a completeness error.
    """
    if not summaries:
        raise CompletenessError([])
    present_pdes = {s.pde for s in summaries}
    present_kinds = {s.scenario for s in summaries}
    rows = [p for p in PDEFamily if p in present_pdes]
    cols = [k for k in ScenarioKind if k in present_kinds]
    by_cell = {(s.pde, s.scenario): s.mean for s in summaries}

    values = np.full((len(rows), len(cols)), np.nan)
    mask = np.ones((len(rows), len(cols)), dtype=bool)
    missing = []
    for i, pde in enumerate(rows):
        for j, kind in enumerate(cols):
            if kind not in APPLICABILITY[pde]:
                continue
            if (pde, kind) not in by_cell:
                missing.append((pde.value, kind.value))
                continue
            values[i, j] = by_cell[(pde, kind)]
            mask[i, j] = False
    if missing:
        raise CompletenessError(missing)
    return HeatmapMatrix(rows=rows, cols=cols, values=values, mask=mask)


class GrowthCurve(BaseModel):
    model_config = ConfigDict(frozen=True)

    times: List[float]
    stats: List[SummaryStats]


def error_growth_curve(curves: Sequence[RolloutCurve]) -> GrowthCurve:
    """Pointwise seed statistics of rollout error along the horizon."""
    if len(curves) < 2:
        raise InsufficientSeedsError(f"need at least 2 seeds of rollout curves, got {len(curves)}")
    times = curves[0].times
    for c in curves[1:]:
        if len(c.times) != len(times) or not np.allclose(c.times, times, rtol=0, atol=1e-12):
            raise ContractError("rollout curves live on different time grids")
    stats = []
    for k in range(len(times)):
        column = [v for v in (c.mean_errors[k] for c in curves) if v is not None and math.isfinite(v)]
        if len(column) < 2:
            raise InsufficientSeedsError(f"fewer than 2 finite curves at t={times[k]:g}")
        stats.append(summarize(column))
    return GrowthCurve(times=list(times), stats=stats)
