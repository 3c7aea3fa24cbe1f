"""
Fourier neural operator in numpy with hand-written reverse mode.

    x -> lift -> [spectral conv + pointwise linear skip -> activation] x n_layers -> project

Spectral convolutions are factorized per spatial axis: layer l holds one complex
(width, width, modes) tensor per axis, applied to the first `modes` rfft
coefficients along that axis. Transforms use norm="forward", so a weight acts on
the same physical wavenumber at every resolution.
"""
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveInt, model_validator
from scipy.special import erf

from services.errors import ContractError, ResolutionError
from services.grid_core import Field, GridSpec

logger = logging.getLogger(__name__)

SKIP_CONNECTION = "pointwise-linear"


class FNOConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    dims: Literal[1, 2]
    modes: PositiveInt = 16
    width: PositiveInt = 32
    n_layers: PositiveInt = 4
    hidden: PositiveInt = 128
    in_channels: PositiveInt
    out_channels: PositiveInt
    complex_output: bool = False
    activation: Literal["gelu", "identity"] = "gelu"

    @model_validator(mode="after")
    def _check(self):
        if self.complex_output and self.out_channels % 2:
            raise ValueError("complex output needs (re, im) channel pairs")
        return self


class LayoutEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    shape: Tuple[int, ...]
    dtype: Literal["float64", "complex128"]

    @property
    def size(self) -> int:
        """Number of float64 slots in the flat vector."""
        n = int(np.prod(self.shape))
        return 2 * n if self.dtype == "complex128" else n


def param_layout(cfg: FNOConfig) -> List[LayoutEntry]:
    w = cfg.width
    entries = [LayoutEntry(name="lift.w", shape=(cfg.in_channels, w), dtype="float64"),
               LayoutEntry(name="lift.b", shape=(w,), dtype="float64")]
    for layer in range(cfg.n_layers):
        for axis in range(cfg.dims):
            entries.append(LayoutEntry(name=f"layer{layer}.spectral{axis}", shape=(w, w, cfg.modes),
                                       dtype="complex128"))
        entries.append(LayoutEntry(name=f"layer{layer}.w", shape=(w, w), dtype="float64"))
        entries.append(LayoutEntry(name=f"layer{layer}.b", shape=(w,), dtype="float64"))
    entries += [
        LayoutEntry(name="proj1.w", shape=(w, cfg.hidden), dtype="float64"),
        LayoutEntry(name="proj1.b", shape=(cfg.hidden,), dtype="float64"),
        LayoutEntry(name="proj2.w", shape=(cfg.hidden, cfg.out_channels), dtype="float64"),
        LayoutEntry(name="proj2.b", shape=(cfg.out_channels,), dtype="float64"),
    ]
    return entries


class FNOParams(BaseModel):
    """Named tensors in `param_layout` order; gradients share the same type."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    config: FNOConfig
    tensors: Dict[str, np.ndarray]

    @model_validator(mode="after")
    def _check(self):
        for entry in param_layout(self.config):
            t = self.tensors.get(entry.name)
            if t is None or t.shape != entry.shape:
                raise ValueError(f"tensor {entry.name} missing or mis-shaped")
        return self

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def count(self) -> int:
        return sum(e.size for e in param_layout(self.config))


def flatten(params: FNOParams) -> np.ndarray:
    parts = []
    for entry in param_layout(params.config):
        t = np.ascontiguousarray(params[entry.name])
        parts.append(t.view(np.float64).ravel() if entry.dtype == "complex128" else t.ravel())
    return np.concatenate(parts)


def unflatten(cfg: FNOConfig, flat: np.ndarray) -> FNOParams:
    flat = np.asarray(flat, dtype=np.float64)
    layout = param_layout(cfg)
    if flat.size != sum(e.size for e in layout):
        raise ContractError(f"flat vector has {flat.size} entries, layout needs {sum(e.size for e in layout)}")
    tensors, offset = {}, 0
    for entry in layout:
        chunk = flat[offset:offset + entry.size].copy()
        offset += entry.size
        if entry.dtype == "complex128":
            chunk = chunk.view(np.complex128)
        tensors[entry.name] = chunk.reshape(entry.shape)
    return FNOParams(config=cfg, tensors=tensors)


def init_params(cfg: FNOConfig, seed: int) -> FNOParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for entry in param_layout(cfg):
        if entry.dtype == "complex128":
            z = rng.standard_normal(entry.shape) + 1j * rng.standard_normal(entry.shape)
            tensors[entry.name] = z / (math.sqrt(2.0) * cfg.width ** 2)
        elif entry.name.endswith(".w"):
            bound = 1.0 / math.sqrt(entry.shape[0])
            tensors[entry.name] = rng.uniform(-bound, bound, entry.shape)
        else:
            tensors[entry.name] = np.zeros(entry.shape)
    return FNOParams(config=cfg, tensors=tensors)


# ---------- building blocks ----------

def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return z
    return 0.5 * z * (1.0 + erf(z / math.sqrt(2.0)))


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(z)
    return 0.5 * (1.0 + erf(z / math.sqrt(2.0))) + z * np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def _mix(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Channel mixing (B, C, ...) x (C, O) -> (B, O, ...)."""
    return np.moveaxis(np.moveaxis(h, 1, -1) @ w, -1, 1)


def _outer(h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Sum over batch and space of h_i g_o."""
    axes = [0] + list(range(2, h.ndim))
    return np.tensordot(h, g, axes=(axes, axes))


def _bias(b: np.ndarray, dims: int) -> np.ndarray:
    return b.reshape((1, -1) + (1,) * dims)


def _sum_channels(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=(0,) + tuple(range(2, g.ndim)))


def _subscripts(dims: int, axis: int) -> str:
    return "".join("k" if a == axis else "z" for a in range(dims))


def _truncate(arr: np.ndarray, axis: int, m: int) -> np.ndarray:
    index = [slice(None)] * arr.ndim
    index[axis] = slice(0, m)
    return arr[tuple(index)]


def _pad(arr: np.ndarray, axis: int, length: int) -> np.ndarray:
    widths = [(0, 0)] * arr.ndim
    widths[axis] = (0, length - arr.shape[axis])
    return np.pad(arr, widths)


def _mode_weights(m: int, ndim: int, axis: int) -> np.ndarray:
    w = np.full(m, 2.0)
    w[0] = 1.0
    shape = [1] * ndim
    shape[axis] = m
    return w.reshape(shape)


def _spectral_forward(h: np.ndarray, weight: np.ndarray, dims: int, axis: int) -> Tuple[np.ndarray, np.ndarray]:
    a = 2 + axis
    n = h.shape[a]
    m = weight.shape[-1]
    coeffs = _truncate(np.fft.rfft(h, axis=a, norm="forward"), a, m)
    s = _subscripts(dims, axis)
    mixed = np.einsum(f"bi{s},iok->bo{s}", coeffs, weight)
    return np.fft.irfft(_pad(mixed, a, n // 2 + 1), n=n, axis=a, norm="forward"), coeffs


def _spectral_backward(g: np.ndarray, coeffs: np.ndarray, weight: np.ndarray,
                       dims: int, axis: int) -> Tuple[np.ndarray, np.ndarray]:
    a = 2 + axis
    n = g.shape[a]
    m = weight.shape[-1]
    s = _subscripts(dims, axis)
    w = _mode_weights(m, g.ndim, a)
    g_hat = _truncate(np.fft.rfft(g, axis=a), a, m) * w
    g_weight = np.einsum(f"bo{s},bi{s}->iok", g_hat, np.conj(coeffs))
    g_coeffs = np.einsum(f"bo{s},iok->bi{s}", g_hat, np.conj(weight))
    g_input = np.fft.irfft(_pad(g_coeffs / w, a, n // 2 + 1), n=n, axis=a)
    return g_weight, g_input


# ---------- forward / backward ----------

def _check_input(cfg: FNOConfig, x: np.ndarray) -> None:
    if np.iscomplexobj(x):
        raise ContractError("the operator takes real channels; split complex fields first")
    if x.ndim != cfg.dims + 2 or x.shape[1] != cfg.in_channels:
        raise ContractError(f"expected (batch, {cfg.in_channels}, *{cfg.dims}D grid), got {x.shape}")
    for n in x.shape[2:]:
        if n < 2 * cfg.modes:
            raise ResolutionError(f"grid size {n} is too coarse for {cfg.modes} modes (needs >= {2 * cfg.modes})")


def forward_batch(params: FNOParams, x: np.ndarray) -> Tuple[np.ndarray, Dict[str, Any]]:
    """Evaluate on a batch (B, in_channels, *grid); the cache feeds `backward_batch`."""
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    _check_input(cfg, x)
    act = cfg.activation

    h = _mix(x, params["lift.w"]) + _bias(params["lift.b"], cfg.dims)
    layers = []
    for layer in range(cfg.n_layers):
        z = _mix(h, params[f"layer{layer}.w"]) + _bias(params[f"layer{layer}.b"], cfg.dims)
        coeffs = []
        for axis in range(cfg.dims):
            y, c = _spectral_forward(h, params[f"layer{layer}.spectral{axis}"], cfg.dims, axis)
            z += y
            coeffs.append(c)
        layers.append((h, coeffs, z))
        h = z if layer == cfg.n_layers - 1 else _activate(z, act)

    q_pre = _mix(h, params["proj1.w"]) + _bias(params["proj1.b"], cfg.dims)
    q = _activate(q_pre, act)
    out = _mix(q, params["proj2.w"]) + _bias(params["proj2.b"], cfg.dims)
    return out, {"x": x, "layers": layers, "h": h, "q_pre": q_pre, "q": q}


def backward_batch(params: FNOParams, cache: Dict[str, Any], g_out: np.ndarray) -> Tuple[FNOParams, np.ndarray]:
    cfg = params.config
    act = cfg.activation
    q = cache["q"]
    if g_out.shape != q.shape[:1] + (cfg.out_channels,) + q.shape[2:]:
        raise ContractError(f"cotangent shape {g_out.shape} does not match the output")
    grads: Dict[str, np.ndarray] = {}

    grads["proj2.w"] = _outer(q, g_out)
    grads["proj2.b"] = _sum_channels(g_out)
    g = _mix(g_out, params["proj2.w"].T) * _activate_grad(cache["q_pre"], act)
    grads["proj1.w"] = _outer(cache["h"], g)
    grads["proj1.b"] = _sum_channels(g)
    g = _mix(g, params["proj1.w"].T)

    for layer in reversed(range(cfg.n_layers)):
        h_in, coeffs, z = cache["layers"][layer]
        if layer != cfg.n_layers - 1:
            g = g * _activate_grad(z, act)
        grads[f"layer{layer}.w"] = _outer(h_in, g)
        grads[f"layer{layer}.b"] = _sum_channels(g)
        g_h = _mix(g, params[f"layer{layer}.w"].T)
        for axis in range(cfg.dims):
            g_w, g_in = _spectral_backward(g, coeffs[axis], params[f"layer{layer}.spectral{axis}"], cfg.dims, axis)
            grads[f"layer{layer}.spectral{axis}"] = g_w
            g_h += g_in
        g = g_h

    grads["lift.w"] = _outer(cache["x"], g)
    grads["lift.b"] = _sum_channels(g)
    g_x = _mix(g, params["lift.w"].T)
    return FNOParams(config=cfg, tensors=grads), g_x


def forward(params: FNOParams, input: Field) -> Field:
    out, _ = forward_batch(params, input.values[None])
    return Field(grid=input.grid, values=out[0])


def backward(params: FNOParams, input: Field, output_cotangent: Field) -> Tuple[FNOParams, Field]:
    if output_cotangent.grid != input.grid:
        raise ContractError("cotangent lives on a different grid than the input")
    _, cache = forward_batch(params, input.values[None])
    grads, g_x = backward_batch(params, cache, np.asarray(output_cotangent.values)[None])
    return grads, Field(grid=input.grid, values=g_x[0])


# ---------- checkpoints ----------

class CheckpointHeader(BaseModel):
    model_config = ConfigDict(frozen=True)

    config: FNOConfig
    seed: int
    pde: str
    grid: GridSpec
    horizon: Optional[float] = None
    normalization: Dict[str, Any] = {}
    layout: List[LayoutEntry]
    skip_connection: str = SKIP_CONNECTION
    blob_sha256: str


def save_checkpoint(stem: Union[str, Path], params: FNOParams, *, seed: int, pde: str, grid: GridSpec,
                    horizon: Optional[float] = None,
                    normalization: Optional[Dict[str, Any]] = None) -> Tuple[Path, Path]:
    """Write `<stem>.bin` (little-endian float64 vector) and the `<stem>.json` header."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    blob = flatten(params).astype("<f8").tobytes()
    header = CheckpointHeader(config=params.config, seed=seed, pde=pde, grid=grid, horizon=horizon,
                              normalization=normalization or {}, layout=param_layout(params.config),
                              blob_sha256=hashlib.sha256(blob).hexdigest())
    stem.with_suffix(".bin").write_bytes(blob)
    stem.with_suffix(".json").write_text(
        json.dumps(header.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.debug(f"Saved checkpoint {stem} ({params.count} parameters)")
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def load_checkpoint(stem: Union[str, Path]) -> Tuple[FNOParams, CheckpointHeader]:
    stem = Path(stem)
    header = CheckpointHeader.model_validate_json(stem.with_suffix(".json").read_text(encoding="utf-8"))
    blob = stem.with_suffix(".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != header.blob_sha256:
        raise ContractError(f"checkpoint blob {stem.with_suffix('.bin')} does not match its header digest")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    return unflatten(header.config, flat), header


def checkpoint_digest(stem: Union[str, Path]) -> str:
    """sha256 over blob and header bytes."""
    stem = Path(stem)
    h = hashlib.sha256()
    h.update(stem.with_suffix(".bin").read_bytes())
    h.update(stem.with_suffix(".json").read_bytes())
    return h.hexdigest()
