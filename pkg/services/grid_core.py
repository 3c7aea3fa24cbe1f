"""
Uniform grids, fields and the spectral toolkit every other service builds on.

- GridSpec: 1D/2D uniform grid, periodic or Dirichlet (node-based)
- Field: immutable channel-major array of real or complex values on a grid
- dft_forward / dft_inverse: unnormalized DFT over the spatial axes
- interpolate: spectral resampling (periodic) or tensor cubic splines (Dirichlet)
- rel_l2_error / l2_norm: grid-weighted discrete L2 norms
- spectral_error_profile: error energy binned by wavenumber magnitude
- encode_field / decode_field: the flat little-endian on-disk record format

All arithmetic is float64 / complex128.
"""
import math
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.interpolate import CubicSpline

from services.errors import (
    ContractError,
    DegenerateNormError,
    DomainMismatchError,
    UnsupportedOperationError,
)


_LENGTH_RTOL = 1e-12


class BoundaryKind(str, Enum):
    PERIODIC = "periodic"
    DIRICHLET = "dirichlet"


class ValueKind(str, Enum):
    REAL = "real"
    COMPLEX = "complex"


class GridSpec(BaseModel):
    """
    Uniform grid on [0, L_1] x ... x [0, L_d].

    Periodic grids hold n points with spacing L/n (the point at L is the
    image of 0); Dirichlet grids hold n nodes including both end points,
    spacing L/(n-1).
    """

    model_config = ConfigDict(frozen=True)

    sizes: Tuple[int, ...]
    lengths: Tuple[float, ...]
    boundary_kind: BoundaryKind = BoundaryKind.PERIODIC

    @field_validator("sizes")
    @classmethod
    def _check_sizes(cls, v):
        if len(v) not in (1, 2):
            raise ValueError(f"dims must be 1 or 2, got {len(v)}")
        for n in v:
            if n < 8:
                raise ValueError(f"grid sizes must be >= 8, got {n}")
        return v

    @field_validator("lengths")
    @classmethod
    def _check_lengths(cls, v):
        for length in v:
            if not (length > 0 and math.isfinite(length)):
                raise ValueError(f"domain lengths must be finite and > 0, got {length}")
        return v

    @model_validator(mode="after")
    def _check_consistency(self):
        if len(self.sizes) != len(self.lengths):
            raise ValueError("sizes and lengths must have the same number of dimensions")
        if self.boundary_kind == BoundaryKind.PERIODIC:
            for n in self.sizes:
                if n & (n - 1):
                    raise ValueError(f"periodic grid sizes must be powers of two, got {n}")
        return self

    @classmethod
    def periodic(cls, sizes: Sequence[int], lengths: Sequence[float]) -> "GridSpec":
        return cls(sizes=tuple(int(n) for n in sizes), lengths=tuple(float(x) for x in lengths),
                   boundary_kind=BoundaryKind.PERIODIC)

    @classmethod
    def dirichlet(cls, sizes: Sequence[int], lengths: Sequence[float]) -> "GridSpec":
        return cls(sizes=tuple(int(n) for n in sizes), lengths=tuple(float(x) for x in lengths),
                   boundary_kind=BoundaryKind.DIRICHLET)

    @property
    def dims(self) -> int:
        return len(self.sizes)

    @property
    def is_periodic(self) -> bool:
        return self.boundary_kind == BoundaryKind.PERIODIC

    @property
    def spacing(self) -> Tuple[float, ...]:
        if self.is_periodic:
            return tuple(L / n for n, L in zip(self.sizes, self.lengths))
        return tuple(L / (n - 1) for n, L in zip(self.sizes, self.lengths))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def nyquist(self) -> Tuple[int, ...]:
        return tuple(n // 2 for n in self.sizes)

    def coordinates(self, axis: int) -> np.ndarray:
        n, L = self.sizes[axis], self.lengths[axis]
        if self.is_periodic:
            return np.arange(n) * (L / n)
        return np.linspace(0.0, L, n)

    def mesh(self) -> Tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*[self.coordinates(a) for a in range(self.dims)], indexing="ij"))

    def mode_numbers(self, axis: int) -> np.ndarray:
        n = self.sizes[axis]
        return np.fft.fftfreq(n, d=1.0 / n)

    def wavenumbers(self, axis: int) -> np.ndarray:
        return 2.0 * np.pi / self.lengths[axis] * self.mode_numbers(axis)

    def quadrature_weights(self) -> np.ndarray:
        """Per-point weights: uniform cells (periodic) or trapezoid (Dirichlet)."""
        axes = []
        for n, h in zip(self.sizes, self.spacing):
            w = np.full(n, h)
            if not self.is_periodic:
                w[0] = w[-1] = 0.5 * h
            axes.append(w)
        if self.dims == 1:
            return axes[0]
        return np.multiply.outer(axes[0], axes[1])

    def refined(self, factor: int) -> "GridSpec":
        if self.is_periodic:
            sizes = tuple(n * factor for n in self.sizes)
        else:
            sizes = tuple((n - 1) * factor + 1 for n in self.sizes)
        return GridSpec(sizes=sizes, lengths=self.lengths, boundary_kind=self.boundary_kind)

    def with_sizes(self, sizes: Sequence[int]) -> "GridSpec":
        return GridSpec(sizes=tuple(int(n) for n in sizes), lengths=self.lengths,
                        boundary_kind=self.boundary_kind)


class Field(BaseModel):
    """Immutable discretized function: values has shape (channels, *grid.sizes)."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    grid: GridSpec
    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def _as_array(cls, v):
        arr = np.asarray(v)
        dtype = np.complex128 if np.iscomplexobj(arr) else np.float64
        arr = np.array(arr, dtype=dtype, copy=True)
        arr.setflags(write=False)
        return arr

    @model_validator(mode="after")
    def _check_values(self):
        if self.values.ndim != self.grid.dims + 1 or self.values.shape[1:] != self.grid.sizes:
            raise ValueError(
                f"values shape {self.values.shape} does not match (channels, {self.grid.sizes})")
        if self.values.shape[0] < 1:
            raise ValueError("a field needs at least one channel")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")
        return self

    @classmethod
    def from_array(cls, grid: GridSpec, values: np.ndarray) -> "Field":
        """Build a field, adding the channel axis for single-channel arrays."""
        arr = np.asarray(values)
        if arr.ndim == grid.dims:
            arr = arr[None, ...]
        return cls(grid=grid, values=arr)

    @classmethod
    def zeros(cls, grid: GridSpec, channels: int = 1, value_kind: ValueKind = ValueKind.REAL) -> "Field":
        dtype = np.complex128 if value_kind == ValueKind.COMPLEX else np.float64
        return cls(grid=grid, values=np.zeros((channels,) + grid.sizes, dtype=dtype))

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def value_kind(self) -> ValueKind:
        return ValueKind.COMPLEX if np.iscomplexobj(self.values) else ValueKind.REAL

    def channel(self, index: int) -> np.ndarray:
        return self.values[index]

    def with_values(self, values: np.ndarray) -> "Field":
        return Field.from_array(self.grid, values)


class SpectralProfile(BaseModel):
    """Error energy per wavenumber-magnitude bin; energies sum to 1 unless degenerate."""

    model_config = ConfigDict(frozen=True)

    bin_edges: Tuple[float, ...]
    energies: Tuple[float, ...]
    degenerate: bool = False

    @model_validator(mode="after")
    def _check(self):
        if len(self.bin_edges) != len(self.energies) + 1:
            raise ValueError("bin_edges must have one more entry than energies")
        if any(e < 0 for e in self.energies):
            raise ValueError("bin energies must be nonnegative")
        return self

    def energy_above(self, wavenumber: float) -> float:
        """Fraction of energy in bins whose lower edge is at or above `wavenumber`."""
        return float(sum(e for lo, e in zip(self.bin_edges[:-1], self.energies)
                         if lo >= wavenumber - 1e-12))


def _spatial_axes(f: Field) -> Tuple[int, ...]:
    return tuple(range(1, f.grid.dims + 1))


def _require_periodic(grid: GridSpec, what: str) -> None:
    if not grid.is_periodic:
        raise UnsupportedOperationError(f"{what} requires a periodic grid, got {grid.boundary_kind.value}")


def dft_forward(f: Field) -> Field:
    """Unnormalized forward DFT of every channel."""
    _require_periodic(f.grid, "dft_forward")
    return Field(grid=f.grid, values=np.fft.fftn(f.values, axes=_spatial_axes(f)))


def dft_inverse(f: Field, value_kind: Optional[ValueKind] = None) -> Field:
    """Inverse of dft_forward; `value_kind=REAL` drops the (roundoff) imaginary part."""
    _require_periodic(f.grid, "dft_inverse")
    values = np.fft.ifftn(f.values, axes=_spatial_axes(f))
    if value_kind == ValueKind.REAL:
        values = values.real
    return Field(grid=f.grid, values=values)


def _resample_axis(coeffs: np.ndarray, n_new: int, axis: int) -> np.ndarray:
    """Zero-pad or truncate unnormalized DFT coefficients along one axis."""
    n_old = coeffs.shape[axis]
    c = np.moveaxis(coeffs, axis, -1)
    out = np.zeros(c.shape[:-1] + (n_new,), dtype=np.complex128)
    if n_new > n_old:
        half = n_old // 2
        out[..., :half] = c[..., :half]
        out[..., n_new - half + 1:] = c[..., half + 1:]
        # split the old Nyquist coefficient between +k and -k
        out[..., half] = 0.5 * c[..., half]
        out[..., n_new - half] = 0.5 * c[..., half]
    else:
        half = n_new // 2
        out[..., :half] = c[..., :half]
        out[..., half + 1:] = c[..., n_old - half + 1:]
        out[..., half] = c[..., half] + c[..., n_old - half]
    out *= n_new / n_old
    return np.moveaxis(out, -1, axis)


def _same_domain(a: GridSpec, b: GridSpec) -> bool:
    if a.dims != b.dims or a.boundary_kind != b.boundary_kind:
        return False
    return all(abs(x - y) <= _LENGTH_RTOL * max(abs(x), abs(y)) for x, y in zip(a.lengths, b.lengths))


def interpolate(f: Field, target: GridSpec) -> Field:
    """Resample a field onto another resolution of the same physical domain."""
    if not _same_domain(f.grid, target):
        raise DomainMismatchError(
            f"cannot interpolate from {f.grid.lengths} ({f.grid.boundary_kind.value}) "
            f"to {target.lengths} ({target.boundary_kind.value})")
    if target.sizes == f.grid.sizes:
        return f if target == f.grid else Field(grid=target, values=f.values)

    if f.grid.is_periodic:
        coeffs = np.fft.fftn(f.values, axes=_spatial_axes(f))
        for axis, n_new in enumerate(target.sizes, start=1):
            coeffs = _resample_axis(coeffs, n_new, axis)
        values = np.fft.ifftn(coeffs, axes=_spatial_axes(f))
        if f.value_kind == ValueKind.REAL:
            values = values.real
        return Field(grid=target, values=values)

    if f.value_kind == ValueKind.COMPLEX:
        values = _spline_resample(f.values.real, f.grid, target) + 1j * _spline_resample(f.values.imag, f.grid, target)
    else:
        values = _spline_resample(f.values, f.grid, target)
    return Field(grid=target, values=values)


def _spline_resample(values: np.ndarray, source: GridSpec, target: GridSpec) -> np.ndarray:
    for axis in range(source.dims):
        spline = CubicSpline(source.coordinates(axis), values, axis=axis + 1)
        values = spline(target.coordinates(axis))
    return values


def _check_comparable(pred: Field, truth: Field) -> None:
    if pred.grid != truth.grid:
        raise ContractError("fields live on different grids")
    if pred.channels != truth.channels or pred.value_kind != truth.value_kind:
        raise ContractError(
            f"fields differ in channels/value kind: {pred.channels}/{pred.value_kind.value} "
            f"vs {truth.channels}/{truth.value_kind.value}")


def weighted_norm(values: np.ndarray, grid: GridSpec) -> float:
    """Grid-weighted L2 norm over all leading axes; complex values use the modulus."""
    w = grid.quadrature_weights()
    return float(np.sqrt(np.sum(w * np.abs(values) ** 2)))


def l2_norm(f: Field) -> float:
    return weighted_norm(f.values, f.grid)


def rel_l2_error(pred: Field, truth: Field) -> float:
    _check_comparable(pred, truth)
    denom = l2_norm(truth)
    if denom == 0.0:
        raise DegenerateNormError("relative error undefined for a zero-norm reference field")
    return weighted_norm(pred.values - truth.values, truth.grid) / denom


def _mode_magnitudes(grid: GridSpec) -> np.ndarray:
    modes = [np.abs(grid.mode_numbers(a)) for a in range(grid.dims)]
    if grid.dims == 1:
        return modes[0]
    kx, ky = np.meshgrid(modes[0], modes[1], indexing="ij")
    return np.sqrt(kx ** 2 + ky ** 2)


def spectral_error_profile(pred: Field, truth: Field, bins: int) -> SpectralProfile:
    """Normalized |e_hat(k)|^2 accumulated into bins over [0, Nyquist]."""
    _check_comparable(pred, truth)
    grid = truth.grid
    _require_periodic(grid, "spectral_error_profile")
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")

    nyquist = float(max(grid.nyquist))
    edges = np.linspace(0.0, nyquist, bins + 1)
    err = pred.values - truth.values
    energy = np.sum(np.abs(np.fft.fftn(err, axes=_spatial_axes(pred))) ** 2, axis=0)
    width = nyquist / bins
    # 2D corner modes beyond the Nyquist radius fall into the last bin
    index = np.minimum((_mode_magnitudes(grid) / width).astype(int), bins - 1)
    per_bin = np.bincount(index.ravel(), weights=energy.ravel(), minlength=bins)

    total = per_bin.sum()
    if total == 0.0:
        return SpectralProfile(bin_edges=tuple(edges), energies=tuple([0.0] * bins), degenerate=True)
    return SpectralProfile(bin_edges=tuple(edges), energies=tuple(per_bin / total))


# ---------- binary record format ----------

_BOUNDARY_CODES = {BoundaryKind.PERIODIC: 0, BoundaryKind.DIRICHLET: 1}
_VALUE_CODES = {ValueKind.REAL: 0, ValueKind.COMPLEX: 1}


def encode_field(f: Field) -> bytes:
    """
    Header of little-endian int32: dims, sizes..., channels, value_kind, boundary_kind;
    then float64 lengths; then the float64 payload (re/im interleaved for complex).
    """
    header = [f.grid.dims, *f.grid.sizes, f.channels,
              _VALUE_CODES[f.value_kind], _BOUNDARY_CODES[f.grid.boundary_kind]]
    payload = np.ascontiguousarray(f.values)
    if f.value_kind == ValueKind.COMPLEX:
        payload = payload.view(np.float64)
    return (np.asarray(header, dtype="<i4").tobytes()
            + np.asarray(f.grid.lengths, dtype="<f8").tobytes()
            + payload.astype("<f8").tobytes())


def decode_field(buf: bytes, offset: int = 0) -> Tuple[Field, int]:
    """Decode one record starting at `offset`; returns the field and the next offset."""
    dims = int(np.frombuffer(buf, dtype="<i4", count=1, offset=offset)[0])
    if dims not in (1, 2):
        raise ContractError(f"corrupt field record: dims={dims}")
    ints = np.frombuffer(buf, dtype="<i4", count=dims + 4, offset=offset)
    sizes = tuple(int(n) for n in ints[1:dims + 1])
    channels, value_code, boundary_code = (int(x) for x in ints[dims + 1:dims + 4])
    offset += 4 * (dims + 4)
    lengths = tuple(float(x) for x in np.frombuffer(buf, dtype="<f8", count=dims, offset=offset))
    offset += 8 * dims

    kind = BoundaryKind.PERIODIC if boundary_code == 0 else BoundaryKind.DIRICHLET
    grid = GridSpec(sizes=sizes, lengths=lengths, boundary_kind=kind)
    count = channels * int(np.prod(sizes)) * (2 if value_code == 1 else 1)
    flat = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64)
    offset += 8 * count
    if value_code == 1:
        flat = flat.view(np.complex128)
    return Field(grid=grid, values=flat.reshape((channels,) + sizes)), offset


def write_fields(path: Union[str, Path], fields: Iterable[Field]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(encode_field(f) for f in fields))


def read_fields(path: Union[str, Path]) -> List[Field]:
    buf = Path(path).read_bytes()
    fields, offset = [], 0
    while offset < len(buf):
        f, offset = decode_field(buf, offset)
        fields.append(f)
    return fields


def write_field(path: Union[str, Path], f: Field) -> None:
    write_fields(path, [f])


def read_field(path: Union[str, Path]) -> Field:
    fields = read_fields(path)
    if len(fields) != 1:
        raise ContractError(f"{path} holds {len(fields)} field records, expected 1")
    return fields[0]
