"""Quality metrics and reports: MSE, MAE, SSIM, energy spectrum, value PDF.

All functions are pure. Reports aggregate per-sample metrics in a fixed
order, so results do not depend on thread count, and serialized payloads
carry no timestamps.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ParameterError
from .field_data import as_field


def _pair(a, b):
    a = as_field(a, "a")
    b = as_field(b, "b")
    if a.shape != b.shape:
        raise ParameterError(f"resolution mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    """Mean over all cells of squared differences."""
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def mae(a, b):
    """Mean over all cells of absolute differences."""
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def ssim(a, b, window=7):
    """Mean local structural similarity over fully interior sliding windows.

    Uniform window, population moments, constants C1 = (0.01 L)^2 and
    C2 = (0.03 L)^2 where L is the larger dynamic range of the two fields
    (symmetric in the arguments, and equal to the ground-truth range in the
    usual case where the reference spans at least the prediction). Two
    zero-range fields compare as 1.0 by convention.
    """
    a, b = _pair(a, b)
    if window < 2 or window > a.shape[0]:
        raise ParameterError(f"window {window} invalid for resolution {a.shape[0]}")
    length = max(np.ptp(a), np.ptp(b))
    if length == 0.0:
        return 1.0
    c1 = (0.01 * length) ** 2
    c2 = (0.03 * length) ** 2

    half = window // 2
    crop = (slice(half, -half), slice(half, -half)) if half else (slice(None),) * 2
    mu_a = uniform_filter(a, window)[crop]
    mu_b = uniform_filter(b, window)[crop]
    var_a = uniform_filter(a * a, window)[crop] - mu_a**2
    var_b = uniform_filter(b * b, window)[crop] - mu_b**2
    cov = uniform_filter(a * b, window)[crop] - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def energy_spectrum(u):
    """Radially binned power of the 2D DFT.

    Bin k collects squared DFT magnitudes whose radial wavenumber rounds to
    k, i.e. lies in [k - 0.5, k + 0.5). Every DFT cell lands in exactly one
    bin, so the binned total preserves the Parseval sum  sum E_k = D^2 sum u^2.
    Returns (wavenumbers, energies).
    """
    u = as_field(u)
    d = u.shape[0]
    power = np.abs(np.fft.fft2(u)) ** 2
    freq = np.fft.fftfreq(d) * d
    radius = np.rint(np.hypot(freq[:, None], freq[None, :])).astype(int)
    energies = np.bincount(radius.ravel(), weights=power.ravel())
    return np.arange(len(energies)), energies


def pdf_estimate(u, bins=64):
    """Normalized histogram density over the field's value range.

    Returns (centers, densities, width). A zero-range field degenerates to a
    single unit-width bin at the constant value with density 1.
    """
    u = as_field(u)
    if bins < 2:
        raise ParameterError(f"need at least 2 bins, got {bins}")
    lo, hi = float(u.min()), float(u.max())
    if lo == hi:
        return np.array([lo]), np.array([1.0]), 1.0
    density, edges = np.histogram(u, bins=bins, range=(lo, hi), density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, density, float(edges[1] - edges[0])


def seam_discontinuity(u, layout):
    """Excess first-difference magnitude across patch-boundary cell pairs.

    Adjacent cell pairs straddling a patch start line (an origin row or
    column beyond zero) count as boundary pairs; the statistic is their mean
    absolute difference minus that of all remaining adjacent pairs. Smooth
    fields score near zero; blocky mosaics score positive.
    """
    u = as_field(u)
    if u.shape[0] != layout.resolution:
        raise ParameterError(
            f"field resolution {u.shape[0]} does not match layout {layout.resolution}"
        )
    lines = [o for o in layout.axis_origins if o > 0]
    dv = np.abs(np.diff(u, axis=0))  # dv[i] pairs rows i and i+1
    dh = np.abs(np.diff(u, axis=1))
    row_mask = np.zeros(dv.shape[0], dtype=bool)
    row_mask[[o - 1 for o in lines]] = True
    boundary_sum = dv[row_mask].sum() + dh[:, row_mask].sum()
    boundary_cnt = dv[row_mask].size + dh[:, row_mask].size
    interior_sum = dv[~row_mask].sum() + dh[:, ~row_mask].sum()
    interior_cnt = dv[~row_mask].size + dh[:, ~row_mask].size
    if boundary_cnt == 0 or interior_cnt == 0:
        return 0.0
    return float(boundary_sum / boundary_cnt - interior_sum / interior_cnt)


@dataclass
class MetricsReport:
    """Aggregated comparison of predicted fields against references."""

    mse: float
    mae: float
    ssim: float
    spectrum: list  # (wavenumber, mean energy of predictions) pairs
    pdf: list  # (bin center, density) pairs over pooled predictions
    sample_count: int
    pdf_bin_width: float = 0.0
    in_sample: bool = False

    def to_dict(self):
        return {
            "mse": self.mse,
            "mae": self.mae,
            "ssim": self.ssim,
            "sample_count": self.sample_count,
            "in_sample": self.in_sample,
            "pdf_bin_width": self.pdf_bin_width,
        }


def pooled_pdf(fields, bins=64):
    """Histogram density over the pooled values of many fields."""
    values = np.asarray(fields, dtype=np.float64).ravel()
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return np.array([lo]), np.array([1.0]), 1.0
    density, edges = np.histogram(values, bins=bins, range=(lo, hi), density=True)
    return 0.5 * (edges[:-1] + edges[1:]), density, float(edges[1] - edges[0])


def report_from_fields(
    true_fields, pred_fields, pdf_bins=64, threads=1, in_sample=False, ssim_window=7
):
    """Build a MetricsReport plus per-sample and reference data arrays.

    Returns (report, extras); extras holds per-sample metric columns and the
    reference spectrum/PDF for side-by-side dumps.
    """
    true_fields = np.asarray(true_fields, dtype=np.float64)
    pred_fields = np.asarray(pred_fields, dtype=np.float64)
    if true_fields.shape != pred_fields.shape:
        raise ParameterError(
            f"field stacks differ: {true_fields.shape} vs {pred_fields.shape}"
        )
    m = len(true_fields)
    if m == 0:
        raise ParameterError("cannot evaluate an empty field set")

    def one(i):
        t, p = true_fields[i], pred_fields[i]
        return mse(t, p), mae(t, p), ssim(t, p, ssim_window)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, range(m)))
    else:
        rows = [one(i) for i in range(m)]
    per_mse, per_mae, per_ssim = (np.array(col) for col in zip(*rows))

    spec_pred = np.mean([energy_spectrum(p)[1] for p in pred_fields], axis=0)
    spec_true = np.mean([energy_spectrum(t)[1] for t in true_fields], axis=0)
    wavenumbers = np.arange(len(spec_pred))
    centers, density, width = pooled_pdf(pred_fields, pdf_bins)
    centers_t, density_t, _ = pooled_pdf(true_fields, pdf_bins)

    report = MetricsReport(
        mse=float(per_mse.mean()),
        mae=float(per_mae.mean()),
        ssim=float(per_ssim.mean()),
        spectrum=[(int(k), float(e)) for k, e in zip(wavenumbers, spec_pred)],
        pdf=[(float(c), float(v)) for c, v in zip(centers, density)],
        sample_count=m,
        pdf_bin_width=width,
        in_sample=in_sample,
    )
    extras = {
        "per_sample_mse": per_mse,
        "per_sample_mae": per_mae,
        "per_sample_ssim": per_ssim,
        "spectrum_true": spec_true,
        "pdf_true_centers": centers_t,
        "pdf_true_density": density_t,
    }
    return report, extras


def write_report(report, extras, outdir):
    """Emit report.json plus per_sample.csv, spectrum.csv, and pdf.csv.

    Column schemas: per_sample.csv (sample, mse, mae, ssim); spectrum.csv
    (wavenumber, energy_pred, energy_true); pdf.csv (center_pred,
    density_pred, center_true, density_true). Payloads carry no timestamps.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    with open(outdir / "per_sample.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "mse", "mae", "ssim"])
        for i in range(report.sample_count):
            writer.writerow(
                [
                    i,
                    repr(float(extras["per_sample_mse"][i])),
                    repr(float(extras["per_sample_mae"][i])),
                    repr(float(extras["per_sample_ssim"][i])),
                ]
            )

    with open(outdir / "spectrum.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["wavenumber", "energy_pred", "energy_true"])
        for (k, e_pred), e_true in zip(report.spectrum, extras["spectrum_true"]):
            writer.writerow([k, repr(float(e_pred)), repr(float(e_true))])

    with open(outdir / "pdf.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["center_pred", "density_pred", "center_true", "density_true"])
        n = max(len(report.pdf), len(extras["pdf_true_centers"]))
        for i in range(n):
            pred = report.pdf[i] if i < len(report.pdf) else ("", "")
            if i < len(extras["pdf_true_centers"]):
                true_pair = (
                    extras["pdf_true_centers"][i],
                    extras["pdf_true_density"][i],
                )
            else:
                true_pair = ("", "")
            writer.writerow(
                [
                    repr(float(pred[0])) if pred[0] != "" else "",
                    repr(float(pred[1])) if pred[1] != "" else "",
                    repr(float(true_pair[0])) if true_pair[0] != "" else "",
                    repr(float(true_pair[1])) if true_pair[1] != "" else "",
                ]
            )
