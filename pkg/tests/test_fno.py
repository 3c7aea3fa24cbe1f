import json
import math

import numpy as np
import pytest

from services.errors import ContractError, ResolutionError
from services.fno import (
    FNOConfig, FNOParams, backward, backward_batch, checkpoint_digest, flatten, forward, forward_batch, init_params,
    load_checkpoint, param_layout, save_checkpoint, unflatten,
)
from services.grid_core import Field, GridSpec, interpolate


def _small(dims=1, activation="gelu", in_channels=2, out_channels=1):
    return FNOConfig(dims=dims, modes=4, width=4, n_layers=2, hidden=8, in_channels=in_channels,
                     out_channels=out_channels, activation=activation)


def _randomize(cfg, seed):
    """Initial weights with nonzero biases and larger spectral weights, so every path carries signal."""
    rng = np.random.default_rng(seed)
    flat = flatten(init_params(cfg, seed))
    return unflatten(cfg, flat + 0.3 * rng.standard_normal(flat.size))


def _loss(params, x, g):
    out, _ = forward_batch(params, x)
    return float(np.sum(out * g))


class TestLayout:
    def test_default_parameter_counts(self):
        ns = FNOConfig(dims=2, in_channels=2, out_channels=1)
        ks = FNOConfig(dims=1, in_channels=1, out_channels=1)
        assert init_params(ns, 0).count == 270817
        assert init_params(ks, 0).count == 139713

    def test_flatten_unflatten_are_inverse(self):
        cfg = _small(dims=2)
        params = init_params(cfg, 3)
        back = unflatten(cfg, flatten(params))
        for entry in param_layout(cfg):
            assert np.array_equal(back[entry.name], params[entry.name])

    def test_wrong_flat_size(self):
        with pytest.raises(ContractError):
            unflatten(_small(), np.zeros(5))

    def test_odd_complex_output_rejected(self):
        with pytest.raises(ValueError):
            FNOConfig(dims=1, in_channels=1, out_channels=3, complex_output=True)


class TestForward:
    def test_zero_weights_give_the_output_bias(self):
        cfg = _small()
        params = init_params(cfg, 0)
        tensors = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        tensors["proj2.b"] = np.array([0.25])
        out, _ = forward_batch(FNOParams(config=cfg, tensors=tensors), np.ones((2, 2, 16)))
        assert np.all(out == 0.25)

    def test_field_interface(self):
        cfg = _small()
        grid = GridSpec.periodic([16], [1.0])
        y = forward(init_params(cfg, 0), Field.from_array(grid, np.ones((2, 16))))
        assert y.grid == grid and y.channels == 1

    def test_resolution_too_coarse(self):
        with pytest.raises(ResolutionError):
            forward_batch(init_params(_small(), 0), np.ones((1, 2, 6)))

    def test_complex_and_misshaped_inputs(self):
        params = init_params(_small(), 0)
        with pytest.raises(ContractError):
            forward_batch(params, np.ones((1, 2, 16), dtype=complex))
        with pytest.raises(ContractError):
            forward_batch(params, np.ones((1, 3, 16)))

    def test_band_limited_inputs_are_resolution_invariant(self):
        cfg = _small(activation="identity", in_channels=1)
        params = _randomize(cfg, 4)
        coarse = GridSpec.periodic([32], [2 * math.pi])
        x = coarse.coordinates(0)
        f = Field.from_array(coarse, np.sin(x) + 0.5 * np.cos(3 * x) + 0.2 * np.sin(8 * x))
        fine_out = forward(params, interpolate(f, coarse.refined(2)))
        coarse_out = interpolate(forward(params, f), coarse.refined(2))
        np.testing.assert_allclose(fine_out.values, coarse_out.values, atol=1e-10)


class TestGradients:
    @pytest.mark.parametrize("dims,activation", [(1, "gelu"), (2, "gelu"), (1, "identity"), (2, "identity")])
    def test_finite_difference_directional_derivatives(self, dims, activation):
        cfg = _small(dims=dims, activation=activation)
        rng = np.random.default_rng(7)
        params = _randomize(cfg, 1)
        shape = (2, 2) + (16,) * dims
        x = rng.standard_normal(shape)
        g = rng.standard_normal((2, 1) + (16,) * dims)
        _, cache = forward_batch(params, x)
        grads, _ = backward_batch(params, cache, g)
        flat, flat_grad = flatten(params), flatten(grads)

        eps = 1e-6
        numeric, analytic = [], []
        for _ in range(50):
            d = rng.standard_normal(flat.size)
            plus = _loss(unflatten(cfg, flat + eps * d), x, g)
            minus = _loss(unflatten(cfg, flat - eps * d), x, g)
            numeric.append((plus - minus) / (2 * eps))
            analytic.append(flat_grad @ d)
        numeric, analytic = np.array(numeric), np.array(analytic)
        assert np.linalg.norm(numeric - analytic) / np.linalg.norm(analytic) < 1e-5

    def test_input_gradient_matches_finite_differences(self):
        cfg = _small(dims=1)
        rng = np.random.default_rng(8)
        params = _randomize(cfg, 2)
        grid = GridSpec.periodic([16], [1.0])
        x = Field.from_array(grid, rng.standard_normal((2, 16)))
        g = Field.from_array(grid, rng.standard_normal((1, 16)))
        _, g_x = backward(params, x, g)
        d = rng.standard_normal((1, 2, 16))
        eps = 1e-6
        fd = (_loss(params, x.values[None] + eps * d, g.values[None])
              - _loss(params, x.values[None] - eps * d, g.values[None])) / (2 * eps)
        assert fd == pytest.approx(float(np.sum(g_x.values * d[0])), rel=1e-6)

    @pytest.mark.parametrize("dims", [1, 2])
    def test_adjoint_dot_product(self, dims):
        """With identity activations the model is affine, so <J dx, g> = <dx, J^T g>."""
        cfg = _small(dims=dims, activation="identity")
        rng = np.random.default_rng(9)
        params = _randomize(cfg, 3)
        shape = (1, 2) + (16,) * dims
        dx = rng.standard_normal(shape)
        g = rng.standard_normal((1, 1) + (16,) * dims)
        f_dx, cache = forward_batch(params, dx)
        f_0, _ = forward_batch(params, np.zeros(shape))
        _, g_x = backward_batch(params, cache, g)
        lhs = float(np.sum((f_dx - f_0) * g))
        rhs = float(np.sum(dx * g_x))
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)

    def test_cotangent_shape_checked(self):
        params = init_params(_small(), 0)
        _, cache = forward_batch(params, np.ones((1, 2, 16)))
        with pytest.raises(ContractError):
            backward_batch(params, cache, np.ones((1, 2, 16)))


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        cfg = _small(dims=2)
        params = _randomize(cfg, 5)
        grid = GridSpec.periodic([16, 16], [1.0, 1.0])
        save_checkpoint(tmp_path / "model", params, seed=5, pde="ns", grid=grid, horizon=1.0,
                        normalization={"feature": {"offset": -3.0}})
        back, header = load_checkpoint(tmp_path / "model")
        assert np.array_equal(flatten(back), flatten(params))
        assert header.seed == 5 and header.grid == grid
        assert [e.name for e in header.layout] == [e.name for e in param_layout(cfg)]
        assert header.skip_connection == "pointwise-linear"

    def test_tampered_blob_is_rejected(self, tmp_path):
        cfg = _small()
        save_checkpoint(tmp_path / "model", init_params(cfg, 0), seed=0, pde="ks",
                        grid=GridSpec.periodic([16], [1.0]))
        blob = bytearray((tmp_path / "model.bin").read_bytes())
        blob[0] ^= 0xFF
        (tmp_path / "model.bin").write_bytes(bytes(blob))
        with pytest.raises(ContractError, match="digest"):
            load_checkpoint(tmp_path / "model")

    def test_digest_covers_the_header(self, tmp_path):
        cfg = _small()
        save_checkpoint(tmp_path / "model", init_params(cfg, 0), seed=0, pde="ks",
                        grid=GridSpec.periodic([16], [1.0]))
        before = checkpoint_digest(tmp_path / "model")
        header = json.loads((tmp_path / "model.json").read_text())
        header["seed"] = 1
        (tmp_path / "model.json").write_text(json.dumps(header))
        assert checkpoint_digest(tmp_path / "model") != before
