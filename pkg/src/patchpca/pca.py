"""Truncated PCA via SVD, fit globally or independently per patch origin.

Fits use the Gram-matrix route: eigendecomposition of the smaller of X'X
(d x d) or XX' (m x m) on the centered data, which is the cheap side when
either the sample count or the dimension is large. Component signs are
canonicalized so serialized bases are reproducible.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh, qr

from .errors import ParameterError
from .patching import PatchSet, assemble_patches, origin_block

_RANK_RTOL = 1e-12


@dataclass(frozen=True)
class PcaBasis:
    """Affine orthonormal basis: x ~ mean + components' z."""

    mean: np.ndarray  # (d,)
    components: np.ndarray  # (k, d), orthonormal rows
    singular_values: np.ndarray  # (k,), non-increasing
    variance_ratio_retained: float

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def k(self):
        return self.components.shape[0]


@dataclass(frozen=True)
class PatchBasisBank:
    """One independent basis per patch origin of a shared layout."""

    layout: PatchLayout
    bases: tuple
    fit_seconds: tuple = ()

    @property
    def segment_widths(self):
        return tuple(b.k for b in self.bases)

    @property
    def total_latent_dim(self):
        return sum(self.segment_widths)


def _canonical_signs(components):
    """Flip each row so its largest-magnitude entry is positive."""
    lead = components[np.arange(len(components)), np.argmax(np.abs(components), axis=1)]
    return components * np.where(lead < 0, -1.0, 1.0)[:, None]


def fit_pca(samples, variance_target=0.99, fixed_k=None):
    """Fit a truncated basis on an (m, d) sample matrix.

    k is the smallest count whose cumulative squared-singular-value fraction
    reaches variance_target, unless fixed_k overrides it. A zero-variance
    matrix degenerates to k = 1 with a zero singular value and a canonical
    unit vector, so latent widths stay well-defined.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ParameterError(f"samples must be 2D, got shape {x.shape}")
    m, d = x.shape
    if m < 2:
        raise ParameterError(f"need at least 2 samples, got {m}")
    if not np.all(np.isfinite(x)):
        raise ParameterError("samples contain non-finite values")
    if fixed_k is None and not 0 < variance_target <= 1:
        raise ParameterError(f"variance target must lie in (0, 1], got {variance_target}")

    mean = x.mean(axis=0)
    xc = x - mean
    if m <= d:
        gram = xc @ xc.T
    else:
        gram = xc.T @ xc
    eigvals, eigvecs = eigh(gram)
    eigvals = eigvals[::-1]
    eigvecs = eigvecs[:, ::-1]
    total = float(np.sum(np.clip(eigvals, 0.0, None)))

    if total <= 0.0:
        components = np.zeros((1, d))
        components[0, 0] = 1.0
        return PcaBasis(mean, components, np.zeros(1), 1.0)

    sigma = np.sqrt(np.clip(eigvals, 0.0, None))
    rank = int(np.sum(sigma > sigma[0] * _RANK_RTOL))
    cumratio = np.cumsum(sigma[:rank] ** 2) / total

    if fixed_k is not None:
        if fixed_k < 1:
            raise ParameterError(f"fixed_k must be >= 1, got {fixed_k}")
        k = min(int(fixed_k), rank)
    else:
        k = int(np.searchsorted(cumratio, variance_target * (1.0 - 1e-12)) + 1)
        k = min(k, rank)

    if m <= d:
        # right singular vectors from the m-side eigenvectors, then one
        # re-orthonormalization pass to absorb roundoff from the division
        v = (xc.T @ eigvecs[:, :k]) / sigma[:k]
        v, _ = qr(v, mode="economic")
        components = v.T
    else:
        components = eigvecs[:, :k].T
    return PcaBasis(
        mean,
        _canonical_signs(components),
        sigma[:k].copy(),
        float(min(cumratio[k - 1], 1.0)),
    )


def encode(basis, x):
    """Project onto the basis: components (x - mean). Accepts (d,) or (m, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != basis.dim:
        raise ParameterError(f"expected length {basis.dim}, got {x.shape[-1]}")
    return (x - basis.mean) @ basis.components.T


def decode(basis, z):
    """Synthesize from codes: mean + components' z. Accepts (k,) or (m, k)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != basis.k:
        raise ParameterError(f"expected {basis.k} codes, got {z.shape[-1]}")
    return basis.mean + z @ basis.components


def fit_patch_bank(fields, layout, variance_target=0.99, fixed_k=None, threads=1):
    """Fit one basis per origin on the (m, p*p) matrix of that origin's patches."""
    fields = np.asarray(fields)
    if len(fields) < 2:
        raise ParameterError("need at least 2 fields to fit a patch bank")

    def fit_origin(index):
        start = time.monotonic()
        try:
            basis = fit_pca(
                origin_block(fields, layout, index),
                variance_target=variance_target,
                fixed_k=fixed_k,
            )
        except ParameterError as err:
            raise ParameterError(f"patch origin {layout.origins[index]}: {err}") from err
        return basis, time.monotonic() - start

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fitted = list(pool.map(fit_origin, range(layout.n_patches)))
    else:
        fitted = [fit_origin(i) for i in range(layout.n_patches)]
    return PatchBasisBank(
        layout,
        tuple(b for b, _ in fitted),
        tuple(t for _, t in fitted),
    )


def latent_dim(side):
    """Latent width of a fitted side (global basis or patch bank)."""
    return side.k if isinstance(side, PcaBasis) else side.total_latent_dim


def encode_fields(side, fields):
    """Batch-encode (m, D, D) fields to (m, K) latent rows.

    Global side: flatten and project. Bank side: per-origin projections
    concatenated in origin order, matching the bank's segment widths.
    """
    fields = np.asarray(fields, dtype=np.float64)
    m = len(fields)
    if isinstance(side, PcaBasis):
        return encode(side, fields.reshape(m, -1))
    cols = [
        encode(side.bases[i], origin_block(fields, side.layout, i))
        for i in range(side.layout.n_patches)
    ]
    return np.concatenate(cols, axis=1)


def encode_field(side, field):
    """Encode one field to its latent vector."""
    return encode_fields(side, np.asarray(field)[None])[0]


def decode_fields(side, latents, window=None):
    """Batch-decode (m, K) latent rows back to (m, D, D) fields.

    Bank side assembles decoded patches by mosaic (window None) or by
    window-weighted blending.
    """
    latents = np.asarray(latents, dtype=np.float64)
    m = len(latents)
    if isinstance(side, PcaBasis):
        d = int(round(np.sqrt(side.dim)))
        if d * d != side.dim:
            raise ParameterError(f"global basis dim {side.dim} is not a square grid")
        return decode(side, latents).reshape(m, d, d)

    widths = side.segment_widths
    if latents.shape[1] != sum(widths):
        raise ParameterError(
            f"latent width {latents.shape[1]} does not match bank width {sum(widths)}"
        )
    bounds = np.cumsum((0,) + widths)
    n_patches = side.layout.n_patches
    p = side.layout.patch_size
    patches = np.empty((m, n_patches, p * p))
    for i in range(n_patches):
        patches[:, i, :] = decode(side.bases[i], latents[:, bounds[i] : bounds[i + 1]])
    out = np.empty((m, side.layout.resolution, side.layout.resolution))
    for j in range(m):
        out[j] = assemble_patches(PatchSet(side.layout, patches[j]), window)
    return out


def decode_field(side, latent, window=None):
    """Decode one latent vector back to a field."""
    return decode_fields(side, np.asarray(latent)[None], window)[0]


def reconstruct_fields(side, fields, window=None):
    """Encode-then-decode round trip, the truncation-only reconstruction."""
    return decode_fields(side, encode_fields(side, fields), window)


def reconstruction_mse(side, fields, window=None):
    """Mean squared truncation error of the round trip over a field set."""
    fields = np.asarray(fields, dtype=np.float64)
    recon = reconstruct_fields(side, fields, window)
    return float(np.mean((recon - fields) ** 2))


def field_side_matrix(fields):
    """Flatten (m, D, D) fields to the (m, D*D) matrix a global fit consumes."""
    fields = np.asarray(fields, dtype=np.float64)
    return fields.reshape(len(fields), -1)


__all__ = [
    "PcaBasis",
    "PatchBasisBank",
    "fit_pca",
    "encode",
    "decode",
    "fit_patch_bank",
    "latent_dim",
    "encode_field",
    "encode_fields",
    "decode_field",
    "decode_fields",
    "reconstruct_fields",
    "reconstruction_mse",
    "field_side_matrix",
]
