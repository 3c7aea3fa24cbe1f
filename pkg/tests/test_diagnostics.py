import math

import numpy as np
import pytest

from services.errors import CompletenessError, ContractError, InsufficientSeedsError
from services.diagnostics import (
    CellSummary, error_growth_curve, heatmap_matrix, summarize, summarize_cells, summary_from_moments,
)
from services.sampler import PDEFamily, ScenarioKind
from services.stress_harness import RolloutCurve, applicable_cells, build_degradation_record

# (mean, std, ci_low, ci_high) over 200 seeds, one row per populated cell
PUBLISHED_ROWS = [
    (1.973, 0.423, 1.914, 2.032),
    (1.503, 0.205, 1.475, 1.531),
    (18.186, 5.976, 17.357, 19.014),
    (11.125, 3.627, 10.622, 11.627),
    (3.907, 1.177, 3.744, 4.071),
    (1.009, 0.063, 1.001, 1.018),
    (1.439, 0.251, 1.404, 1.474),
    (1.007, 0.063, 0.998, 1.016),
    (1.032, 0.126, 1.015, 1.050),
    (1.038, 0.125, 1.021, 1.055),
    (3.524, 0.930, 3.395, 3.652),
    (1.023, 0.126, 1.005, 1.040),
    (2.130, 0.679, 2.035, 2.224),
    (6.225, 2.425, 5.889, 6.561),
    (2.255, 0.521, 2.183, 2.327),
    (0.956, 0.207, 0.927, 0.985),
    (1.607, 0.385, 1.553, 1.660),
    (0.961, 0.095, 0.948, 0.975),
]


def _record(d, pde=PDEFamily.NLS, scenario=ScenarioKind.PARAM_SHIFT, seed=0):
    return build_degradation_record([d * 0.1], 0.1, pde=pde, scenario=scenario, seed=seed)


class TestSummaryStats:
    @pytest.mark.parametrize("mean,std,low,high", PUBLISHED_ROWS)
    def test_published_intervals(self, mean, std, low, high):
        s = summary_from_moments(mean, std, 200)
        assert s.ci_low == pytest.approx(low, abs=1e-3)
        assert s.ci_high == pytest.approx(high, abs=1e-3)

    def test_sample_standard_deviation(self):
        s = summarize([1.0, 2.0, 3.0, 4.0])
        assert s.mean == pytest.approx(2.5)
        assert s.std == pytest.approx(math.sqrt(5.0 / 3.0))
        assert s.ci_high - s.mean == pytest.approx(1.96 * s.std / 2.0)

    def test_constant_values_have_a_point_interval(self):
        s = summarize([1.7] * 5)
        assert s.std == 0.0 and s.ci_low == s.ci_high == pytest.approx(1.7)

    def test_permutation_invariant_and_scale_equivariant(self, rng):
        values = list(rng.uniform(1.0, 3.0, 20))
        a = summarize(values)
        assert summarize(values[::-1]) == a
        b = summarize([3.0 * v for v in values])
        assert b.mean == pytest.approx(3.0 * a.mean)
        assert b.ci_low == pytest.approx(3.0 * a.ci_low)

    def test_needs_two_seeds(self):
        with pytest.raises(InsufficientSeedsError):
            summarize([_record(1.5)])
        with pytest.raises(InsufficientSeedsError):
            summary_from_moments(1.0, 0.1, 1)

    def test_mixed_cells_rejected(self):
        with pytest.raises(ContractError):
            summarize([_record(1.0), _record(2.0, scenario=ScenarioKind.ROLLOUT)])

    def test_records_contribute_their_factor(self):
        s = summarize([_record(2.0, seed=0), _record(4.0, seed=1)])
        assert s.mean == pytest.approx(3.0)


class TestSummarizeCells:
    def test_cells_are_sorted_and_thin_cells_dropped(self):
        records = [_record(2.0, PDEFamily.NS, ScenarioKind.ROLLOUT, s) for s in range(3)]
        records += [_record(1.0, PDEFamily.KS, ScenarioKind.PERTURBATION, s) for s in range(2)]
        records.append(_record(5.0, PDEFamily.NLS, ScenarioKind.PARAM_SHIFT))
        cells = summarize_cells(records)
        assert [(c.pde, c.scenario) for c in cells] == [(PDEFamily.KS, ScenarioKind.PERTURBATION),
                                                        (PDEFamily.NS, ScenarioKind.ROLLOUT)]
        assert cells[1].n == 3


def _summary(pde, kind, mean=1.0):
    return CellSummary(pde=pde, scenario=kind, mean=mean, std=0.0, ci_low=mean, ci_high=mean, n=2)


class TestHeatmap:
    def test_full_campaign_masks_inapplicable_cells(self):
        matrix = heatmap_matrix([_summary(p, k, 1.0 + i) for i, (p, k) in enumerate(applicable_cells())])
        assert matrix.values.shape == (5, 5)
        assert int((~matrix.mask).sum()) == 18
        assert matrix.cell(PDEFamily.KS, ScenarioKind.PARAM_SHIFT) is None
        assert matrix.cell(PDEFamily.KS, ScenarioKind.ROLLOUT) is not None

    def test_partial_campaign_covers_present_rows(self):
        matrix = heatmap_matrix([_summary(PDEFamily.KS, ScenarioKind.ROLLOUT, 1.6),
                                 _summary(PDEFamily.KS, ScenarioKind.PERTURBATION, 0.96)])
        assert matrix.rows == [PDEFamily.KS]
        assert matrix.cols == [ScenarioKind.ROLLOUT, ScenarioKind.PERTURBATION]
        assert matrix.cell(PDEFamily.KS, ScenarioKind.ROLLOUT) == pytest.approx(1.6)

    def test_missing_applicable_cell(self):
        with pytest.raises(CompletenessError) as info:
            heatmap_matrix([_summary(PDEFamily.NLS, ScenarioKind.ROLLOUT),
                            _summary(PDEFamily.NS, ScenarioKind.PARAM_SHIFT)])
        assert ("nls", "param_shift") in info.value.missing

    def test_empty(self):
        with pytest.raises(CompletenessError):
            heatmap_matrix([])


class TestGrowthCurve:
    def test_pointwise_statistics(self):
        curves = [RolloutCurve(times=[1.0, 2.0], mean_errors=[0.1, 0.2], counts=[3, 3]),
                  RolloutCurve(times=[1.0, 2.0], mean_errors=[0.3, 0.6], counts=[3, 2])]
        growth = error_growth_curve(curves)
        assert growth.times == [1.0, 2.0]
        assert [s.mean for s in growth.stats] == pytest.approx([0.2, 0.4])

    def test_nan_entries_are_skipped(self):
        curves = [RolloutCurve(times=[1.0, 2.0], mean_errors=[0.1, 0.2], counts=[1, 1]),
                  RolloutCurve(times=[1.0, 2.0], mean_errors=[0.3, 0.4], counts=[1, 1]),
                  RolloutCurve(times=[1.0, 2.0], mean_errors=[0.2, math.nan], counts=[1, 0])]
        growth = error_growth_curve(curves)
        assert growth.stats[1].n == 2
        assert growth.stats[0].n == 3

    def test_fully_diverged_steps_are_skipped(self):
        curves = [RolloutCurve(times=[1.0, 2.0], mean_errors=[0.1, None], counts=[2, 0]),
                  RolloutCurve(times=[1.0, 2.0], mean_errors=[0.3, 0.5], counts=[2, 1]),
                  RolloutCurve(times=[1.0, 2.0], mean_errors=[0.2, 0.7], counts=[2, 2])]
        growth = error_growth_curve(curves)
        assert growth.stats[1].n == 2
        assert growth.stats[1].mean == pytest.approx(0.6)

    def test_mismatched_time_grids(self):
        with pytest.raises(ContractError):
            error_growth_curve([RolloutCurve(times=[1.0], mean_errors=[0.1], counts=[1]),
                                RolloutCurve(times=[2.0], mean_errors=[0.1], counts=[1])])

    def test_single_curve(self):
        with pytest.raises(InsufficientSeedsError):
            error_growth_curve([RolloutCurve(times=[1.0], mean_errors=[0.1], counts=[1])])
