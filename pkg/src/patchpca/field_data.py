"""Synthetic Poisson dataset: random coefficient fields and their solutions.

Coefficient fields f are drawn from a Gaussian random field with Matern-like
spectral decay on a sine basis, which is compatible with the homogeneous
Dirichlet boundary. Solutions u satisfy the 5-point finite-difference
discretization of  laplace(u) = f  on the unit square with u = 0 on the
boundary. Datasets are persisted in a small checksummed binary format with a
JSON sidecar for provenance.
"""

from __future__ import annotations

import binascii
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy import fft as sfft
from scipy.sparse.linalg import LinearOperator, cg

from .errors import (
    ChecksumError,
    MagicError,
    ParameterError,
    SolverError,
    TruncationError,
    VersionError,
)

DATASET_MAGIC = b"PPCA"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHIIB")
_CRC = struct.Struct("<I")


def as_field(values, name="field"):
    """Validate and return a square 2D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ParameterError(f"{name} must be a square 2D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class GrfParams:
    """Spectral-decay parameters and base seed for the coefficient sampler."""

    alpha: float = 3.0
    tau: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.tau <= 0:
            raise ParameterError("alpha and tau must be strictly positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterError("seed must fit in an unsigned 64-bit integer")


@dataclass(frozen=True)
class SolverConfig:
    """Poisson solve settings.

    method "cg" runs matrix-free conjugate gradient on the (SPD) negated
    stencil system; "dst" uses the fast sine-transform direct solver. Both
    satisfy the same residual contract.
    """

    tolerance: float = 1e-10
    max_iterations: int = 0  # 0 means the 10*D default chosen at solve time
    method: str = "cg"

    def __post_init__(self):
        if not 0 < self.tolerance < 1:
            raise ParameterError("tolerance must lie in (0, 1)")
        if self.max_iterations < 0:
            raise ParameterError("max_iterations must be non-negative")
        if self.method not in ("cg", "dst"):
            raise ParameterError(f"unknown solver method {self.method!r}")


@dataclass
class Dataset:
    """n coefficient/solution pairs on a shared D x D grid.

    Arrays are float32 with shape (n, D, D); solves are performed in float64
    and quantized on storage, so residual guarantees refer to the solve-time
    values.
    """

    resolution: int
    f: np.ndarray
    u: np.ndarray
    params: GrfParams | None = None
    solver: SolverConfig | None = None
    sidecar: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        expect = (len(self.f), self.resolution, self.resolution)
        if self.f.shape != expect or self.u.shape != expect:
            raise ParameterError(
                f"dataset arrays must have shape {expect}, "
                f"got f {self.f.shape} and u {self.u.shape}"
            )

    @property
    def n(self):
        return len(self.f)

    def __len__(self):
        return len(self.f)

    def sample(self, i):
        """Return the (f, u) pair at index i as float64 fields."""
        return self.f[i].astype(np.float64), self.u[i].astype(np.float64)


def _sigma_grid(alpha, tau, n_modes):
    """Per-mode standard deviations sigma_k on the interior sine basis."""
    k = np.arange(1, n_modes + 1, dtype=np.float64)
    ksq = k[:, None] ** 2 + k[None, :] ** 2
    return tau ** (alpha - 1.0) * (np.pi**2 * ksq + tau**2) ** (-alpha / 2.0)


def sample_grf(params, resolution, sample_index, _draws=None):
    """Draw one coefficient field, deterministic in (params.seed, sample_index).

    The field is sum_k c_k * 2 sin(pi k1 x) sin(pi k2 y) over interior modes
    k in {1..D-2}^2, with independent c_k ~ N(0, sigma_k^2). The boundary ring
    is exactly zero. `_draws` is a test hook supplying the standard-normal
    draws directly.
    """
    d = int(resolution)
    if d < 4:
        raise ParameterError(f"resolution must be >= 4, got {resolution}")
    n = d - 2
    if _draws is None:
        rng = np.random.default_rng([params.seed, int(sample_index)])
        draws = rng.standard_normal((n, n))
    else:
        draws = np.asarray(_draws, dtype=np.float64)
        if draws.shape != (n, n):
            raise ParameterError(f"_draws must have shape {(n, n)}")
    coeff = draws * _sigma_grid(params.alpha, params.tau, n)
    # dstn type 1 evaluates 4*sum c sin sin at interior nodes; the basis
    # carries a factor 2, hence the division.
    out = np.zeros((d, d))
    out[1:-1, 1:-1] = sfft.dstn(coeff, type=1) / 2.0
    return out


def grf_mean_square(params, resolution):
    """Exact interior-averaged variance of the sampler, by direct spectral sum.

    Used as the oracle for the sampler's empirical statistics.
    """
    n = resolution - 2
    sigma = _sigma_grid(params.alpha, params.tau, n)
    # mean over interior nodes of sin^2(pi k i / (n+1)) is (n+1)/(2n) per axis
    axis_mean = (n + 1) / (2.0 * n)
    return float(np.sum(sigma**2) * 4.0 * axis_mean**2)


def _apply_neg_laplacian(v, h2):
    """(4*center - neighbors)/h^2 on the interior grid, zero Dirichlet halo."""
    n = v.shape[0]
    p = np.zeros((n + 2, n + 2))
    p[1:-1, 1:-1] = v
    return (4.0 * v - p[:-2, 1:-1] - p[2:, 1:-1] - p[1:-1, :-2] - p[1:-1, 2:]) / h2


def stencil_residual(u, f):
    """Relative residual of the 5-point stencil relation against f.

    Computes ||(u_E+u_W+u_N+u_S-4u_C)/h^2 - f||_2 / ||f||_2 over interior
    nodes. Zero f returns the absolute residual norm instead.
    """
    u = as_field(u, "u")
    f = as_field(f, "f")
    if u.shape != f.shape:
        raise ParameterError(f"shape mismatch: u {u.shape} vs f {f.shape}")
    h2 = (1.0 / (u.shape[0] - 1)) ** 2
    lap = -_apply_neg_laplacian(u[1:-1, 1:-1], h2)
    diff = np.linalg.norm(lap - f[1:-1, 1:-1])
    denom = np.linalg.norm(f[1:-1, 1:-1])
    return float(diff / denom) if denom > 0 else float(diff)


def solve_poisson(f, config=SolverConfig()):
    """Solve the 5-point discretization of laplace(u) = f with u = 0 on the boundary.

    Returns u with an exactly zero boundary ring and interior residual at or
    below config.tolerance (relative to ||f||). Raises SolverError when the
    iterative method fails to converge.
    """
    f = as_field(f, "f")
    d = f.shape[0]
    if d < 3:
        raise ParameterError(f"resolution must be >= 3, got {d}")
    n = d - 2
    h2 = (1.0 / (d - 1)) ** 2
    # negate both sides so the operator (-laplacian) is SPD for CG
    b = -f[1:-1, 1:-1]
    u = np.zeros((d, d))
    if not np.any(b):
        return u

    if config.method == "dst":
        # eigenvalues of the negated stencil on the sine basis
        k = np.arange(1, n + 1)
        lam1 = (4.0 / h2) * np.sin(np.pi * k / (2 * (n + 1))) ** 2
        lam = lam1[:, None] + lam1[None, :]
        interior = sfft.idstn(sfft.dstn(b, type=1) / lam, type=1)
    else:
        maxiter = config.max_iterations or 10 * d
        op = LinearOperator(
            shape=(n * n, n * n),
            matvec=lambda v: _apply_neg_laplacian(v.reshape(n, n), h2).ravel(),
            dtype=np.float64,
        )
        interior, _ = cg(op, b.ravel(), rtol=config.tolerance, atol=0.0, maxiter=maxiter)
        interior = interior.reshape(n, n)

    u[1:-1, 1:-1] = interior
    residual = stencil_residual(u, f)
    if residual > config.tolerance:
        raise SolverError(
            f"poisson solve did not reach tolerance {config.tolerance:g} "
            f"(final relative residual {residual:.3e})",
            residual=residual,
        )
    return u


def generate_dataset(n, resolution, params=GrfParams(), config=SolverConfig(), threads=1):
    """Generate n independent (f, u) pairs, reproducible from params.seed.

    Samples are independent given (seed, index), so generation parallelizes
    over samples; results are assembled in index order regardless of thread
    count.
    """
    if n < 1:
        raise ParameterError(f"sample count must be >= 1, got {n}")
    d = int(resolution)

    def make_pair(i):
        f = sample_grf(params, d, i)
        try:
            u = solve_poisson(f, config)
        except SolverError as err:
            raise SolverError(
                f"sample {i}: {err}", residual=err.residual, sample_index=i
            ) from err
        return f.astype(np.float32), u.astype(np.float32)

    f_arr = np.empty((n, d, d), dtype=np.float32)
    u_arr = np.empty((n, d, d), dtype=np.float32)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = pool.map(make_pair, range(n))
            for i, (fi, ui) in enumerate(pairs):
                f_arr[i], u_arr[i] = fi, ui
    else:
        for i in range(n):
            f_arr[i], u_arr[i] = make_pair(i)
    return Dataset(resolution=d, f=f_arr, u=u_arr, params=params, solver=config)


def save_dataset(dataset, path):
    """Write the binary dataset file plus its JSON provenance sidecar.

    Layout: magic "PPCA", version u16, D u32, n u32, flags u8, then
    n*2*D*D little-endian float32 (f then u per sample), then CRC32 of that
    payload. The sidecar (path + ".json") holds parameters, solver settings,
    summary statistics, and the creation timestamp; the binary payload itself
    is byte-deterministic.
    """
    path = Path(path)
    d, n = dataset.resolution, dataset.n
    payload = np.empty((n, 2, d, d), dtype="<f4")
    payload[:, 0] = dataset.f
    payload[:, 1] = dataset.u
    raw = payload.tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, d, n, 0))
        fh.write(raw)
        fh.write(_CRC.pack(binascii.crc32(raw)))

    sidecar = {
        "grf": None
        if dataset.params is None
        else {
            "alpha": dataset.params.alpha,
            "tau": dataset.params.tau,
            "seed": int(dataset.params.seed),
        },
        "solver": None
        if dataset.solver is None
        else {
            "tolerance": dataset.solver.tolerance,
            "max_iterations": dataset.solver.max_iterations,
            "method": dataset.solver.method,
        },
        "stats": {
            "f_mean": float(dataset.f.mean()),
            "f_std": float(dataset.f.std()),
            "u_mean": float(dataset.u.mean()),
            "u_std": float(dataset.u.std()),
        },
        "created": datetime.now(timezone.utc).isoformat(),
    }
    sidecar.update(dataset.sidecar)
    with open(path.with_name(path.name + ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


def load_dataset(path):
    """Read a dataset file back, verifying magic, version, length, and CRC."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise TruncationError(f"{path}: file shorter than the fixed header")
        magic, version, d, n, _flags = _HEADER.unpack(head)
        if magic != DATASET_MAGIC:
            raise MagicError(DATASET_MAGIC, magic)
        if version > DATASET_VERSION:
            raise VersionError(version, DATASET_VERSION)
        raw = fh.read(n * 2 * d * d * 4)
        if len(raw) < n * 2 * d * d * 4:
            raise TruncationError(
                f"{path}: payload ended after {len(raw)} of {n * 2 * d * d * 4} bytes"
            )
        tail = fh.read(_CRC.size)
        if len(tail) < _CRC.size:
            raise TruncationError(f"{path}: missing payload checksum")
    (stored,) = _CRC.unpack(tail)
    actual = binascii.crc32(raw)
    if stored != actual:
        raise ChecksumError("payload", stored, actual)

    arr = np.frombuffer(raw, dtype="<f4").reshape(n, 2, d, d)
    params = solver = None
    sidecar = {}
    sidecar_path = path.with_name(path.name + ".json")
    if sidecar_path.exists():
        with open(sidecar_path) as fh:
            sidecar = json.load(fh)
        if sidecar.get("grf"):
            params = GrfParams(**sidecar["grf"])
        if sidecar.get("solver"):
            solver = SolverConfig(**sidecar["solver"])
    return Dataset(
        resolution=d,
        f=np.ascontiguousarray(arr[:, 0]),
        u=np.ascontiguousarray(arr[:, 1]),
        params=params,
        solver=solver,
        sidecar=sidecar,
    )


def dataset_overview(path):
    """Header summary of a dataset file without loading the sample payload."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise TruncationError(f"{path}: file shorter than the fixed header")
    magic, version, d, n, flags = _HEADER.unpack(head)
    if magic != DATASET_MAGIC:
        raise MagicError(DATASET_MAGIC, magic)
    expected = _HEADER.size + n * 2 * d * d * 4 + _CRC.size
    overview = {
        "format": "dataset",
        "version": version,
        "resolution": d,
        "samples": n,
        "flags": flags,
        "file_bytes": path.stat().st_size,
        "expected_bytes": expected,
    }
    sidecar_path = path.with_name(path.name + ".json")
    if sidecar_path.exists():
        with open(sidecar_path) as fh:
            overview["sidecar"] = json.load(fh)
    return overview
