import math

import numpy as np
import pytest

from services.errors import ConfigError, ContractError
from services.grid_core import Field
from services.problems import (
    ParamFeature, advance, default_problem_settings, encode_input, in_channels, out_channels, primary_input_name,
    problem_settings, refine_instance, solve_instance, solve_trajectory,
)
from services.sampler import IN_DIST, PDEFamily, sample_instance


class TestSettings:
    def test_desk_defaults(self):
        nls = default_problem_settings(PDEFamily.NLS)
        assert (nls.size, nls.param_range, nls.param_stress) == (128, (0.5, 1.0), (1.5, 2.0, 2.5))
        ns = default_problem_settings(PDEFamily.NS)
        assert (ns.size, ns.rollout_multiples) == (32, (2, 3, 5))
        assert ns.param_stress[0] == pytest.approx(10 ** -3.5)
        ks = default_problem_settings(PDEFamily.KS)
        assert ks.length == pytest.approx(22 * math.pi) and ks.param_name is None
        assert default_problem_settings(PDEFamily.POISSON).grid().sizes == (33, 33)
        assert default_problem_settings(PDEFamily.BLACK_SCHOLES).param_stress == (0.45, 0.6)

    def test_control_is_range_midpoint(self):
        assert default_problem_settings(PDEFamily.NLS).param_control == pytest.approx(0.75)
        assert default_problem_settings(PDEFamily.KS).param_control is None

    def test_grids_follow_the_family(self):
        assert not default_problem_settings(PDEFamily.POISSON).grid().is_periodic
        assert default_problem_settings(PDEFamily.NS).grid().dims == 2
        assert default_problem_settings(PDEFamily.BLACK_SCHOLES).grid().dims == 1

    def test_overrides(self):
        s = problem_settings(PDEFamily.NLS, {"size": 64})
        assert s.size == 64 and s.param_range == (0.5, 1.0)

    def test_bad_overrides_are_config_errors(self):
        with pytest.raises(ConfigError):
            problem_settings(PDEFamily.NLS, {"not_a_setting": 1})
        with pytest.raises(ConfigError):
            problem_settings(PDEFamily.BLACK_SCHOLES, {"length": 2.0})

    def test_parameter_features(self):
        assert ParamFeature(offset=0.5, scale=0.5).encode(1.0) == pytest.approx(1.0)
        nu = ParamFeature(transform="log10", offset=-3.0, scale=0.5)
        assert nu.encode(1e-3) == pytest.approx(0.0)
        assert nu.encode(10 ** -3.5) == pytest.approx(-1.0)


class TestChannels:
    def test_primary_inputs(self):
        names = [primary_input_name(p) for p in PDEFamily]
        assert names == ["u0", "f", "omega0", "payoff", "u0"]

    @pytest.mark.parametrize("pde", list(PDEFamily))
    def test_encoded_input_matches_declared_channels(self, pde, small_settings):
        settings = small_settings(pde)
        inst = sample_instance(pde, IN_DIST, 4, settings)
        x = encode_input(inst, settings)
        assert x.channels == in_channels(pde)
        assert x.value_kind.value == "real"
        assert x.grid == settings.grid()

    def test_nls_parameter_channel_is_constant(self, small_settings):
        settings = small_settings(PDEFamily.NLS)
        inst = sample_instance(PDEFamily.NLS, IN_DIST, 4, settings)
        x = encode_input(inst, settings).values
        assert np.all(x[2] == settings.feature.encode(inst.params["kappa"]))
        np.testing.assert_array_equal(x[0] + 1j * x[1], inst.inputs["u0"].values[0])

    def test_poisson_edges_extend_along_the_normal(self, small_settings):
        settings = small_settings(PDEFamily.POISSON)
        inst = sample_instance(PDEFamily.POISSON, IN_DIST, 4, settings)
        x = encode_input(inst, settings).values
        south, west = x[2], x[4]
        assert np.all(south == south[:, :1])
        assert np.all(west == west[:1, :])
        assert x[6][-1, 0] == pytest.approx(1.0) and x[7][0, -1] == pytest.approx(1.0)


class TestSolve:
    @pytest.mark.parametrize("pde", list(PDEFamily))
    def test_targets_have_output_channels(self, pde, small_settings):
        settings = small_settings(pde)
        target = solve_instance(sample_instance(pde, IN_DIST, 6, settings), settings)
        assert target.channels == out_channels(pde)
        assert target.value_kind.value == "real"

    def test_trajectory_starts_with_the_one_step_target(self, small_settings):
        settings = small_settings(PDEFamily.KS)
        inst = sample_instance(PDEFamily.KS, IN_DIST, 6, settings)
        traj = solve_trajectory(inst, settings, 2)
        assert len(traj) == 2
        np.testing.assert_allclose(traj[0].values, solve_instance(inst, settings).values)

    def test_stationary_families_have_no_trajectory(self, small_settings):
        settings = small_settings(PDEFamily.POISSON)
        with pytest.raises(ContractError):
            solve_trajectory(sample_instance(PDEFamily.POISSON, IN_DIST, 6, settings), settings, 2)

    def test_refined_nls_solve_shrinks_the_time_step(self):
        settings = problem_settings(PDEFamily.NLS, {"size": 32, "solver_dt": 0.01})
        inst = refine_instance(sample_instance(PDEFamily.NLS, IN_DIST, 2, settings), 2)
        target = solve_instance(inst, settings)
        assert target.grid.sizes == (64,)


class TestStateUpdates:
    def test_advance_feeds_output_back(self, small_settings):
        settings = small_settings(PDEFamily.NLS)
        inst = sample_instance(PDEFamily.NLS, IN_DIST, 1, settings)
        out = Field.from_array(settings.grid(), np.stack([np.ones(32), 2 * np.ones(32)]))
        nxt = advance(inst, out)
        assert np.all(nxt.inputs["u0"].values == 1 + 2j)
        assert nxt.params == inst.params

    def test_stationary_families_cannot_advance(self, small_settings):
        settings = small_settings(PDEFamily.BLACK_SCHOLES)
        inst = sample_instance(PDEFamily.BLACK_SCHOLES, IN_DIST, 1, settings)
        with pytest.raises(ContractError):
            advance(inst, Field.zeros(settings.grid()))

    def test_refined_payoff_is_exact(self, small_settings):
        settings = small_settings(PDEFamily.BLACK_SCHOLES)
        inst = refine_instance(sample_instance(PDEFamily.BLACK_SCHOLES, IN_DIST, 1, settings), 2)
        S = inst.grid.coordinates(0)
        expected = (S > inst.params["strike"]).astype(float) if inst.params["digital"] else \
            np.maximum(S - inst.params["strike"], 0.0)
        np.testing.assert_array_equal(inst.inputs["payoff"].values[0], expected)
        assert inst.grid.sizes == (65,)
