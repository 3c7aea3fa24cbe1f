"""
Reference solvers producing ground truth for the five PDE families.

    NLS      i u_t + u_xx - kappa |u|^2 u = 0          Strang split-step Fourier
    Poisson  -div(a grad u) = f, u = g on the boundary  conservative FD + conjugate gradient
    NS       w_t + u.grad w = nu lap w + s              pseudospectral, integrating-factor RK4
    BS       V_t + 1/2 s^2 S^2 V_SS + r S V_S - r V = 0 Crank-Nicolson with Rannacher start-up
    KS       u_t + u u_x + u_xx + u_xxxx = 0            ETDRK4 (contour-integral coefficients)

Every solver is a pure function of (config, input) and checks for blow-up after
each step.
"""
import json
import logging
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, PositiveFloat, PositiveInt, model_validator
from scipy.linalg import LinAlgError, solve_banded
from scipy.sparse.linalg import LinearOperator, cg
from scipy.stats import norm

from services.errors import (
    BlowUpError,
    ContractError,
    NumericError,
    SolverFailureError,
    StabilityError,
)
from services.grid_core import BoundaryKind, Field, GridSpec, ValueKind, read_fields, write_fields

logger = logging.getLogger(__name__)

BLOWUP_THRESHOLD = 1e8
KS_DT_LIMIT = 0.25


class Trajectory(BaseModel):
    model_config = ConfigDict(frozen=True)

    times: Tuple[float, ...]
    fields: Tuple[Field, ...]

    @property
    def final(self) -> Field:
        return self.fields[-1]


def _step_count(t_final: float, dt: float) -> int:
    n = int(round(t_final / dt))
    if n < 1 or abs(n * dt - t_final) > 1e-9 * max(t_final, 1.0):
        raise ValueError(f"t_final={t_final} is not an integer number of steps dt={dt}")
    return n


def _check_state(values: np.ndarray, step: int, solver: str) -> None:
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    if not math.isfinite(peak) or peak > BLOWUP_THRESHOLD:
        raise BlowUpError(step, peak, solver)


def _save_due(step: int, n_steps: int, save_every: Optional[int]) -> bool:
    if step == n_steps:
        return True
    return save_every is not None and step % save_every == 0


def _require_grid(field: Field, grid: GridSpec, what: str) -> None:
    if field.grid != grid:
        raise ContractError(f"{what} is not sampled on the solver grid")


# ---------- nonlinear Schroedinger ----------

class NLSConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    kappa: float
    t_final: PositiveFloat
    dt: PositiveFloat
    grid: GridSpec
    save_every: Optional[PositiveInt] = None

    @property
    def stability_bound(self) -> float:
        return self.grid.spacing[0] ** 2 / math.pi

    @property
    def n_steps(self) -> int:
        return _step_count(self.t_final, self.dt)

    @model_validator(mode="after")
    def _check(self):
        if self.grid.dims != 1 or not self.grid.is_periodic:
            raise ValueError("NLS needs a 1D periodic grid")
        if self.dt > self.stability_bound * (1 + 1e-12):
            raise ValueError(f"dt={self.dt} exceeds the recorded bound dx^2/pi={self.stability_bound:.3e}")
        _step_count(self.t_final, self.dt)
        return self


def solve_nls(cfg: NLSConfig, u0: Field) -> Trajectory:
    _require_grid(u0, cfg.grid, "u0")
    if u0.value_kind != ValueKind.COMPLEX or u0.channels != 1:
        raise ContractError("NLS initial data must be a single complex channel")

    k = cfg.grid.wavenumbers(0)
    linear = np.exp(-1j * k ** 2 * cfg.dt)
    half = 0.5 * cfg.dt
    u = np.array(u0.values[0])
    n_steps = cfg.n_steps
    times, fields = [0.0], [u0]

    for step in range(1, n_steps + 1):
        u = u * np.exp(-1j * cfg.kappa * np.abs(u) ** 2 * half)
        u = np.fft.ifft(linear * np.fft.fft(u))
        u = u * np.exp(-1j * cfg.kappa * np.abs(u) ** 2 * half)
        _check_state(u, step, "nls")
        if _save_due(step, n_steps, cfg.save_every):
            times.append(step * cfg.dt)
            fields.append(Field.from_array(cfg.grid, u))
    return Trajectory(times=tuple(times), fields=tuple(fields))


def nls_mass(u: Field) -> float:
    w = u.grid.quadrature_weights()
    return float(np.sum(w * np.abs(u.values[0]) ** 2))


def nls_momentum(u: Field) -> float:
    k = u.grid.wavenumbers(0)
    ux = np.fft.ifft(1j * k * np.fft.fft(u.values[0]))
    w = u.grid.quadrature_weights()
    return float(np.sum(w * np.imag(np.conj(u.values[0]) * ux)))


# ---------- variable-coefficient Poisson ----------

class EdgeTrace(BaseModel):
    """Dirichlet data on the four edges of a rectangle; axis 0 is x, axis 1 is y."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    south: np.ndarray  # y = 0, along x
    north: np.ndarray  # y = L, along x
    west: np.ndarray   # x = 0, along y
    east: np.ndarray   # x = L, along y

    @model_validator(mode="after")
    def _check_corners(self):
        corners = [(self.south[0], self.west[0]), (self.south[-1], self.east[0]),
                   (self.north[0], self.west[-1]), (self.north[-1], self.east[-1])]
        for a, b in corners:
            if abs(a - b) > 1e-12 * max(1.0, abs(a), abs(b)):
                raise ValueError("edge traces must agree at the corners")
        if len(self.south) != len(self.north) or len(self.west) != len(self.east):
            raise ValueError("opposite edges must have the same number of nodes")
        return self

    @classmethod
    def constant(cls, grid: GridSpec, value: float) -> "EdgeTrace":
        nx, ny = grid.sizes
        return cls(south=np.full(nx, value), north=np.full(nx, value),
                   west=np.full(ny, value), east=np.full(ny, value))

    @classmethod
    def from_array(cls, values: np.ndarray) -> "EdgeTrace":
        return cls(south=values[:, 0].copy(), north=values[:, -1].copy(),
                   west=values[0, :].copy(), east=values[-1, :].copy())

    def fill(self, values: np.ndarray) -> np.ndarray:
        out = np.array(values, dtype=np.float64)
        out[:, 0], out[:, -1] = self.south, self.north
        out[0, :], out[-1, :] = self.west, self.east
        return out

    def min(self) -> float:
        return float(min(self.south.min(), self.north.min(), self.west.min(), self.east.min()))

    def max(self) -> float:
        return float(max(self.south.max(), self.north.max(), self.west.max(), self.east.max()))


class PoissonConfig(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    grid: GridSpec
    coefficient: Field
    source: Field
    boundary: EdgeTrace
    cg_tol: PositiveFloat = 1e-12
    max_iter: Optional[PositiveInt] = None

    @model_validator(mode="after")
    def _check(self):
        if self.grid.dims != 2 or self.grid.boundary_kind != BoundaryKind.DIRICHLET:
            raise ValueError("Poisson needs a 2D Dirichlet grid")
        for name in ("coefficient", "source"):
            if getattr(self, name).grid != self.grid:
                raise ValueError(f"{name} is not sampled on the solver grid")
        if float(np.min(self.coefficient.values)) <= 0.0:
            raise ValueError("coefficient a(x) must be strictly positive")
        if (len(self.boundary.south), len(self.boundary.west)) != self.grid.sizes:
            raise ValueError("boundary trace does not match the grid")
        return self


def _poisson_system(cfg: PoissonConfig):
    nx, ny = cfg.grid.sizes
    hx, hy = cfg.grid.spacing
    a = cfg.coefficient.values[0]
    u_bc = cfg.boundary.fill(np.zeros((nx, ny)))

    index = -np.ones((nx, ny), dtype=np.int64)
    index[1:-1, 1:-1] = np.arange((nx - 2) * (ny - 2)).reshape(nx - 2, ny - 2)
    ax = 0.5 * (a[1:, :] + a[:-1, :]) / hx ** 2   # a_{i+1/2, j}
    ay = 0.5 * (a[:, 1:] + a[:, :-1]) / hy ** 2   # a_{i, j+1/2}

    I, J = np.meshgrid(np.arange(1, nx - 1), np.arange(1, ny - 1), indexing="ij")
    rows = index[I, J].ravel()
    neighbours = [
        (1, 0, ax[I, J]), (-1, 0, ax[I - 1, J]),
        (0, 1, ay[I, J]), (0, -1, ay[I, J - 1]),
    ]
    diag = sum(c for _, _, c in neighbours).ravel()
    rhs = cfg.source.values[0][I, J].ravel().copy()

    r_idx, c_idx, vals = [rows], [rows], [diag]
    for di, dj, coeff in neighbours:
        col = index[I + di, J + dj].ravel()
        coeff = coeff.ravel()
        inner = col >= 0
        r_idx.append(rows[inner])
        c_idx.append(col[inner])
        vals.append(-coeff[inner])
        rhs[~inner] += coeff[~inner] * u_bc[I + di, J + dj].ravel()[~inner]

    m = (nx - 2) * (ny - 2)
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(r_idx), np.concatenate(c_idx))), shape=(m, m))
    return A, rhs, diag, u_bc


def solve_poisson(cfg: PoissonConfig) -> Field:
    A, b, diag, u = _poisson_system(cfg)
    m = b.size
    jacobi = LinearOperator((m, m), matvec=lambda x: x / diag, dtype=np.float64)
    x0 = np.full(m, 0.5 * (cfg.boundary.min() + cfg.boundary.max()))
    max_iter = cfg.max_iter or 10 * m
    x, info = cg(A, b, x0=x0, rtol=cfg.cg_tol, atol=0.0, maxiter=max_iter, M=jacobi)

    scale = np.linalg.norm(b) or 1.0
    residual = float(np.linalg.norm(b - A @ x) / scale)
    if info != 0 or not np.all(np.isfinite(x)):
        logger.warning(f"Poisson CG stopped with info={info}, relative residual {residual:.3e}")
        raise SolverFailureError(f"conjugate gradient did not converge within {max_iter} iterations", residual)

    u[1:-1, 1:-1] = x.reshape(cfg.grid.sizes[0] - 2, cfg.grid.sizes[1] - 2)
    return Field.from_array(cfg.grid, u)


# ---------- 2D Navier-Stokes (vorticity form) ----------

class NSConfig(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    nu: PositiveFloat
    forcing: Optional[Field] = None
    t_final: PositiveFloat
    dt: PositiveFloat
    grid: GridSpec
    dealias: bool = True
    save_every: Optional[PositiveInt] = None

    @property
    def n_steps(self) -> int:
        return _step_count(self.t_final, self.dt)

    @model_validator(mode="after")
    def _check(self):
        if self.grid.dims != 2 or not self.grid.is_periodic:
            raise ValueError("Navier-Stokes needs a 2D periodic grid")
        if self.forcing is not None and self.forcing.grid != self.grid:
            raise ValueError("forcing is not sampled on the solver grid")
        _step_count(self.t_final, self.dt)
        return self


class _SpectralVorticity:
    """Wavenumbers, dealiasing mask and velocity recovery for one periodic grid."""

    def __init__(self, grid: GridSpec, dealias: bool = True):
        self.kx = grid.wavenumbers(0)[:, None]
        self.ky = grid.wavenumbers(1)[None, :]
        self.k2 = self.kx ** 2 + self.ky ** 2
        self.k2_inv = np.where(self.k2 > 0, 1.0 / np.where(self.k2 > 0, self.k2, 1.0), 0.0)
        mx = np.abs(grid.mode_numbers(0))[:, None]
        my = np.abs(grid.mode_numbers(1))[None, :]
        if dealias:
            self.mask = (mx <= grid.sizes[0] // 3) & (my <= grid.sizes[1] // 3)
        else:
            self.mask = np.ones(grid.sizes, dtype=bool)
        self.dx, self.dy = grid.spacing

    def velocity(self, w_hat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        psi_hat = w_hat * self.k2_inv
        u = np.fft.ifft2(1j * self.ky * psi_hat).real
        v = np.fft.ifft2(-1j * self.kx * psi_hat).real
        return u, v

    def advection(self, w_hat: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Spectrum of u.grad(omega) with the 2/3 mask applied to the product only.

        The factors are not truncated first; an unforced state that starts inside the mask
        stays there, and then the masked product is alias-free.
        """
        u, v = self.velocity(w_hat)
        wx = np.fft.ifft2(1j * self.kx * w_hat).real
        wy = np.fft.ifft2(1j * self.ky * w_hat).real
        return self.mask * np.fft.fft2(u * wx + v * wy), u, v


def solve_ns(cfg: NSConfig, omega0: Field) -> Trajectory:
    _require_grid(omega0, cfg.grid, "omega0")
    w = np.array(omega0.values[0], dtype=np.float64)
    mean = float(w.mean())
    if abs(mean) >= 1e-12:
        raise ContractError(f"initial vorticity must have zero mean, got {mean:.3e}")
    w -= mean

    ops = _SpectralVorticity(cfg.grid, cfg.dealias)
    s_hat = np.zeros(cfg.grid.sizes, dtype=np.complex128)
    if cfg.forcing is not None:
        s_hat = np.fft.fft2(cfg.forcing.values[0])
        s_hat[0, 0] = 0.0

    dt = cfg.dt
    e_full = np.exp(-cfg.nu * ops.k2 * dt)
    e_half = np.exp(-cfg.nu * ops.k2 * dt / 2)
    w_hat = np.fft.fft2(w)
    n_steps = cfg.n_steps
    times, fields = [0.0], [Field.from_array(cfg.grid, w)]

    for step in range(1, n_steps + 1):
        adv, u, v = ops.advection(w_hat)
        cfl = dt * (np.max(np.abs(u)) / ops.dx + np.max(np.abs(v)) / ops.dy)
        if cfl >= 1.0:
            raise StabilityError(step, float(cfl))
        a = dt * (s_hat - adv)
        b = dt * (s_hat - ops.advection(e_half * (w_hat + a / 2))[0])
        c = dt * (s_hat - ops.advection(e_half * w_hat + b / 2)[0])
        d = dt * (s_hat - ops.advection(e_full * w_hat + e_half * c)[0])
        w_hat = e_full * w_hat + (e_full * a + 2 * e_half * (b + c) + d) / 6
        w_hat[0, 0] = 0.0

        _check_state(w_hat, step, "navier-stokes")
        if _save_due(step, n_steps, cfg.save_every):
            times.append(step * dt)
            fields.append(Field.from_array(cfg.grid, np.fft.ifft2(w_hat).real))
    return Trajectory(times=tuple(times), fields=tuple(fields))


def ns_kinetic_energy(omega: Field) -> float:
    ops = _SpectralVorticity(omega.grid, dealias=False)
    u, v = ops.velocity(np.fft.fft2(omega.values[0]))
    return float(0.5 * np.sum(u ** 2 + v ** 2) * omega.grid.cell_volume)


def ns_enstrophy(omega: Field) -> float:
    return float(np.sum(omega.values[0] ** 2) * omega.grid.cell_volume)


# ---------- Black-Scholes ----------

class BSConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    sigma: PositiveFloat
    r: float = 0.05
    T: PositiveFloat = 1.0
    s_max: PositiveFloat
    grid: GridSpec
    dt: PositiveFloat
    upper_boundary: Literal["linear", "discounted"] = "linear"
    rannacher: bool = True

    @property
    def n_steps(self) -> int:
        return _step_count(self.T, self.dt)

    @model_validator(mode="after")
    def _check(self):
        if self.r < 0:
            raise ValueError("rate r must be >= 0")
        if self.grid.dims != 1 or self.grid.boundary_kind != BoundaryKind.DIRICHLET:
            raise ValueError("Black-Scholes needs a 1D Dirichlet grid in S")
        if abs(self.grid.lengths[0] - self.s_max) > 1e-12 * self.s_max:
            raise ValueError("grid length must equal s_max")
        _step_count(self.T, self.dt)
        return self


def _bs_operator(cfg: BSConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sub-, main- and super-diagonal of the spatial operator in tau = T - t."""
    S = cfg.grid.coordinates(0)
    h = cfg.grid.spacing[0]
    diffusion = 0.5 * cfg.sigma ** 2 * S ** 2 / h ** 2
    drift = cfg.r * S / (2 * h)
    lower = diffusion - drift
    main = -2 * diffusion - cfg.r
    upper = diffusion + drift
    # S = 0 reduces to V_tau = -r V; S = s_max closes with V_SS = 0 or a discounted value
    lower[0] = upper[0] = 0.0
    upper[-1] = 0.0
    if cfg.upper_boundary == "linear":
        lower[-1] = -cfg.r * S[-1] / h
        main[-1] = cfg.r * S[-1] / h - cfg.r
    else:
        lower[-1] = 0.0
        main[-1] = -cfg.r
    return lower, main, upper


def _theta_step(V: np.ndarray, ops, dt: float, theta: float) -> np.ndarray:
    lower, main, upper = ops
    explicit = V + (1 - theta) * dt * (main * V)
    explicit[1:] += (1 - theta) * dt * lower[1:] * V[:-1]
    explicit[:-1] += (1 - theta) * dt * upper[:-1] * V[1:]

    banded = np.zeros((3, V.size))
    banded[0, 1:] = -theta * dt * upper[:-1]
    banded[1, :] = 1 - theta * dt * main
    banded[2, :-1] = -theta * dt * lower[1:]
    try:
        out = solve_banded((1, 1), banded, explicit)
    except (LinAlgError, ValueError) as e:
        raise NumericError(f"tridiagonal solve failed: {e}") from e
    if not np.all(np.isfinite(out)):
        raise NumericError("tridiagonal solve produced non-finite prices")
    return out


def solve_bs(cfg: BSConfig, payoff: Field) -> Field:
    """Prices at t = 0 from the payoff at maturity."""
    _require_grid(payoff, cfg.grid, "payoff")
    ops = _bs_operator(cfg)
    V = np.array(payoff.values[0], dtype=np.float64)
    n_steps = cfg.n_steps
    start = 0
    if cfg.rannacher:
        for _ in range(2):
            V = _theta_step(V, ops, cfg.dt / 2, theta=1.0)
        start = 1
    for step in range(start + 1, n_steps + 1):
        V = _theta_step(V, ops, cfg.dt, theta=0.5)
        _check_state(V, step, "black-scholes")
    return Field.from_array(cfg.grid, V)


def bs_call_price(S: np.ndarray, K: float, r: float, sigma: float, T: float) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    with np.errstate(divide="ignore"):
        d1 = (np.log(S / K) + (r + 0.5 * sigma ** 2) * T) / (sigma * math.sqrt(T))
    d2 = d1 - sigma * math.sqrt(T)
    return S * norm.cdf(d1) - K * math.exp(-r * T) * norm.cdf(d2)


def bs_digital_price(S: np.ndarray, K: float, r: float, sigma: float, T: float) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    with np.errstate(divide="ignore"):
        d2 = (np.log(S / K) + (r - 0.5 * sigma ** 2) * T) / (sigma * math.sqrt(T))
    return math.exp(-r * T) * norm.cdf(d2)


# ---------- Kuramoto-Sivashinsky ----------

class KSConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    domain_length: PositiveFloat = 22 * math.pi
    t_final: PositiveFloat
    dt: PositiveFloat
    grid: GridSpec
    save_every: Optional[PositiveInt] = None
    contour_points: PositiveInt = 32

    @property
    def n_steps(self) -> int:
        return _step_count(self.t_final, self.dt)

    @model_validator(mode="after")
    def _check(self):
        if self.grid.dims != 1 or not self.grid.is_periodic:
            raise ValueError("Kuramoto-Sivashinsky needs a 1D periodic grid")
        if abs(self.grid.lengths[0] - self.domain_length) > 1e-12 * self.domain_length:
            raise ValueError("grid length must equal domain_length")
        if self.dt > KS_DT_LIMIT:
            raise ValueError(f"dt={self.dt} is outside the ETDRK4 accuracy regime (dt <= {KS_DT_LIMIT})")
        _step_count(self.t_final, self.dt)
        return self


class _ETDRK4:
    """Kassam-Trefethen ETDRK4 for u_hat_t = L u_hat + N(u_hat) with diagonal L."""

    def __init__(self, cfg: KSConfig):
        n = cfg.grid.sizes[0]
        dt = cfg.dt
        self.k = 2 * np.pi / cfg.domain_length * np.arange(n // 2 + 1)
        lin = self.k ** 2 - self.k ** 4
        # odd derivative: the Nyquist mode carries no derivative
        self.k_odd = self.k.copy()
        self.k_odd[-1] = 0.0
        self.mask = np.arange(n // 2 + 1) <= n // 3
        self.n = n

        self.e_full = np.exp(dt * lin)
        self.e_half = np.exp(dt * lin / 2)
        roots = np.exp(1j * np.pi * (np.arange(cfg.contour_points) + 0.5) / cfg.contour_points)
        lr = dt * lin[:, None] + roots[None, :]
        self.q = dt * np.real(np.mean((np.exp(lr / 2) - 1) / lr, axis=1))
        self.f1 = dt * np.real(np.mean((-4 - lr + np.exp(lr) * (4 - 3 * lr + lr ** 2)) / lr ** 3, axis=1))
        self.f2 = dt * np.real(np.mean((2 + lr + np.exp(lr) * (lr - 2)) / lr ** 3, axis=1))
        self.f3 = dt * np.real(np.mean((-4 - 3 * lr - lr ** 2 + np.exp(lr) * (4 - lr)) / lr ** 3, axis=1))

    def nonlinear(self, v_hat: np.ndarray) -> np.ndarray:
        # 2/3 mask on the product u*u only, as in the vorticity solver
        u = np.fft.irfft(v_hat, self.n)
        return -0.5j * self.k_odd * self.mask * np.fft.rfft(u * u)

    def step(self, v: np.ndarray) -> np.ndarray:
        nv = self.nonlinear(v)
        a = self.e_half * v + self.q * nv
        na = self.nonlinear(a)
        b = self.e_half * v + self.q * na
        nb = self.nonlinear(b)
        c = self.e_half * a + self.q * (2 * nb - nv)
        nc = self.nonlinear(c)
        return self.e_full * v + self.f1 * nv + 2 * self.f2 * (na + nb) + self.f3 * nc


def solve_ks(cfg: KSConfig, u0: Field) -> Trajectory:
    _require_grid(u0, cfg.grid, "u0")
    if u0.value_kind != ValueKind.REAL:
        raise ContractError("K-S initial data must be real")
    mean = float(np.mean(u0.values[0]))
    if abs(mean) >= 1e-10:
        raise ContractError(f"K-S initial data must have zero mean, got {mean:.3e}")

    scheme = _ETDRK4(cfg)
    v = np.fft.rfft(u0.values[0])
    n_steps = cfg.n_steps
    times, fields = [0.0], [u0]
    for step in range(1, n_steps + 1):
        v = scheme.step(v)
        _check_state(v, step, "kuramoto-sivashinsky")
        if _save_due(step, n_steps, cfg.save_every):
            times.append(step * cfg.dt)
            fields.append(Field.from_array(cfg.grid, np.fft.irfft(v, scheme.n)))
    return Trajectory(times=tuple(times), fields=tuple(fields))


# ---------- persistence ----------

def config_echo(cfg: BaseModel) -> Dict[str, Any]:
    """JSON-safe view of a solver config; field-valued members are summarized."""
    echo: Dict[str, Any] = {}
    for name in type(cfg).model_fields:
        value = getattr(cfg, name)
        if isinstance(value, Field):
            echo[name] = {"channels": value.channels, "sizes": list(value.grid.sizes)}
        elif isinstance(value, EdgeTrace):
            echo[name] = {"min": value.min(), "max": value.max()}
        elif isinstance(value, BaseModel):
            echo[name] = value.model_dump(mode="json")
        else:
            echo[name] = value
    return echo


def save_trajectory(stem: Union[str, Path], traj: Trajectory, cfg: BaseModel) -> Tuple[Path, Path]:
    """Write `<stem>.fld` (one record per saved time) and a `<stem>.json` sidecar."""
    stem = Path(stem)
    data_path = stem.with_suffix(".fld")
    meta_path = stem.with_suffix(".json")
    write_fields(data_path, traj.fields)
    sidecar = {
        "config": config_echo(cfg),
        "times": list(traj.times),
        "records": len(traj.fields),
        "written_at": datetime.now(timezone.utc).isoformat(),
    }
    meta_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    logger.debug(f"Saved trajectory with {len(traj.fields)} records to {data_path}")
    return data_path, meta_path


def load_trajectory(stem: Union[str, Path]) -> Trajectory:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    return Trajectory(times=tuple(meta["times"]), fields=tuple(read_fields(stem.with_suffix(".fld"))))


__all__: List[str] = [
    "BSConfig", "EdgeTrace", "KSConfig", "NLSConfig", "NSConfig", "PoissonConfig", "Trajectory",
    "bs_call_price", "bs_digital_price", "load_trajectory", "ns_enstrophy", "ns_kinetic_energy",
    "nls_mass", "nls_momentum", "save_trajectory", "solve_bs", "solve_ks", "solve_nls", "solve_ns",
    "solve_poisson",
]
