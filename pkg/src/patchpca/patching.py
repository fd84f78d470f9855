"""Patch geometry: layouts, extraction, and mosaic or blended reassembly.

A layout lists the top-left origins of p x p patches on a D x D grid,
stride s apart, with the final origin per axis clamped so the last patch
ends exactly at the field edge. When clamping alone would leave cells
uncovered, origins are redistributed evenly at the same count; the count
itself is always floor((D − p)/s) + 1 per axis whenever that count can
cover the axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InternalError, ParameterError
from .field_data import as_field


@dataclass(frozen=True)
class PatchLayout:
    """Geometry of one patch decomposition, shared by extract and assemble."""

    resolution: int
    patch_size: int
    stride: int
    axis_origins: tuple[int, ...]

    @property
    def origins(self):
        """Row-major (row, col) origin list."""
        return [(r, c) for r in self.axis_origins for c in self.axis_origins]

    @property
    def n_patches(self):
        return len(self.axis_origins) ** 2

    @property
    def overlapping(self):
        return self.stride < self.patch_size


@dataclass(frozen=True)
class PatchSet:
    """Row-major vectorized patches, one row per layout origin."""

    layout: PatchLayout
    patches: np.ndarray  # (n_patches, p*p)

    def __post_init__(self):
        p = self.layout.patch_size
        if self.patches.shape != (self.layout.n_patches, p * p):
            raise ParameterError(
                f"patches must have shape {(self.layout.n_patches, p * p)}, "
                f"got {self.patches.shape}"
            )


def _axis_origins(d, p, s):
    """Origins along one axis: strided, clamped, coverage-repaired."""
    count = (d - p) // s + 1
    origins = [i * s for i in range(count)]
    origins[-1] = d - p  # clamp so the last patch ends at the field edge
    while True:
        if all(b - a <= p for a, b in zip(origins, origins[1:])):
            return tuple(origins)
        # clamping opened a gap wider than p; spread the same count evenly,
        # growing the count only if even spacing still cannot cover
        origins = sorted({int(round(v)) for v in np.linspace(0, d - p, count)})
        if len(origins) == count and all(
            b - a <= p for a, b in zip(origins, origins[1:])
        ):
            return tuple(origins)
        count += 1


def make_layout(resolution, patch_size, stride=None):
    """Build the deterministic patch layout for (D, p, s); s defaults to p."""
    d, p = int(resolution), int(patch_size)
    s = p if stride is None else int(stride)
    if p < 1 or p > d:
        raise ParameterError(f"patch size {p} must lie in [1, {d}]")
    if s < 1 or s > p:
        raise ParameterError(f"stride {s} must lie in [1, patch size {p}]")
    return PatchLayout(d, p, s, _axis_origins(d, p, s))


def extract_patches(field, layout):
    """Vectorize the p x p block at every origin, row-major."""
    field = as_field(field)
    if field.shape[0] != layout.resolution:
        raise ParameterError(
            f"field resolution {field.shape[0]} does not match "
            f"layout resolution {layout.resolution}"
        )
    p = layout.patch_size
    rows = np.empty((layout.n_patches, p * p))
    for k, (r, c) in enumerate(layout.origins):
        rows[k] = field[r : r + p, c : c + p].ravel()
    return PatchSet(layout, rows)


def origin_block(fields, layout, index):
    """All samples' vectorized patches at one origin: (m, p*p) from (m, D, D).

    The per-origin view PCA fits consume; avoids materializing every patch of
    every sample at once.
    """
    r, c = layout.origins[index]
    p = layout.patch_size
    return np.asarray(fields[:, r : r + p, c : c + p], dtype=np.float64).reshape(
        len(fields), p * p
    )


def hanning_window(patch_size):
    """Raised-cosine weights w(i,j) = H(i)H(j), strictly positive on 1..p."""
    p = int(patch_size)
    if p < 2:
        raise ParameterError(f"window size must be >= 2, got {p}")
    n = np.arange(1, p + 1)
    h = 0.5 * (1.0 - np.cos(2.0 * np.pi * n / (p + 1)))
    h = 0.5 * (h + h[::-1])  # exact reversal symmetry despite cos roundoff
    return np.outer(h, h)


def assemble_patches(patch_set, window=None):
    """Reassemble a field from patches.

    window None selects mosaic mode (direct placement, requires a
    non-overlapping layout). A (p, p) weight window selects blend mode: each
    patch is weighted by the window, accumulated, and the sum divided by the
    accumulated weight, i.e. a weighted average over every patch covering a
    cell.
    """
    layout = patch_set.layout
    d, p = layout.resolution, layout.patch_size
    tiles = patch_set.patches.reshape(-1, p, p)
    out = np.zeros((d, d))

    if window is None:
        if layout.overlapping:
            raise ParameterError(
                f"mosaic assembly requires stride == patch size, got "
                f"stride {layout.stride} < {p}"
            )
        for k, (r, c) in enumerate(layout.origins):
            out[r : r + p, c : c + p] = tiles[k]
        return out

    window = np.asarray(window, dtype=np.float64)
    if window.shape != (p, p):
        raise ParameterError(f"window shape {window.shape} does not match patch size {p}")
    if np.any(window <= 0):
        raise ParameterError("blend window weights must be strictly positive")
    weight = np.zeros((d, d))
    for k, (r, c) in enumerate(layout.origins):
        out[r : r + p, c : c + p] += window * tiles[k]
        weight[r : r + p, c : c + p] += window
    if np.any(weight <= 0):
        raise InternalError("a covered cell accumulated zero blend weight")
    return out / weight
