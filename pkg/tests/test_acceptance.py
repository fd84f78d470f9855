"""End-to-end acceptance checks for the full stack.

Ten numbered guarantees, one test each, ordered cheapest first. Every test
prints a single line "ACCEPTANCE nn PASS/FAIL ..." with the measured numbers
so a log scrape shows the whole scorecard. Criteria 06-08 share one
desk-scale comparison (D=128, 2000 samples, four trained variants) built by
a module fixture; expect the bulk of this file's runtime there.
"""

import hashlib
from time import perf_counter

import numpy as np
import pytest

from patchpca.cli import main as cli_main
from patchpca.field_data import (
    GrfParams,
    SolverConfig,
    generate_dataset,
    sample_grf,
    solve_poisson,
    stencil_residual,
)
from patchpca.metrics import (
    energy_spectrum,
    pdf_estimate,
    report_from_fields,
    seam_discontinuity,
    ssim,
)
from patchpca.neuralnet import (
    TrainConfig,
    loss_and_grad,
    make_cnn,
    make_mlp,
)
from patchpca.patching import (
    assemble_patches,
    extract_patches,
    hanning_window,
    make_layout,
)
from patchpca.pca import (
    field_side_matrix,
    fit_pca,
    reconstruction_mse,
)
from patchpca.pipelines import (
    RefinerSpec,
    VariantSpec,
    fit_pipeline,
    predict_fields,
    split_indices,
)


def _verdict(number, ok, detail, started):
    status = "PASS" if ok else "FAIL"
    line = f"ACCEPTANCE {number:02d} {status}  {detail}  [{perf_counter() - started:.1f}s]"
    print(line, flush=True)
    assert ok, line


# --- 01: solver correctness -------------------------------------------------


def test_01_solver_convergence_and_residuals():
    """Manufactured-solution order >= 1.9 for both methods at D in {16,32,64};
    CG residuals <= 1e-8 relative on 100 random right-hand sides at D=128.
    Budget: under a minute."""
    t0 = perf_counter()
    orders = {}
    for method in ("cg", "dst"):
        errs, hs = [], []
        for d in (16, 32, 64):
            x = np.linspace(0.0, 1.0, d)
            u_star = np.outer(np.sin(np.pi * x), np.sin(np.pi * x))
            f = 2.0 * np.pi**2 * u_star
            config = SolverConfig(method=method, tolerance=1e-12, max_iterations=20000)
            u = solve_poisson(f, config)
            errs.append(float(np.max(np.abs(u - u_star))))
            hs.append(1.0 / (d - 1))
        pair_orders = [
            np.log(errs[i] / errs[i + 1]) / np.log(hs[i] / hs[i + 1])
            for i in range(2)
        ]
        orders[method] = min(pair_orders)

    rng = np.random.default_rng(2026)
    worst = 0.0
    config = SolverConfig(method="cg", tolerance=1e-10, max_iterations=20000)
    for _ in range(100):
        f = np.zeros((128, 128))
        f[1:-1, 1:-1] = rng.standard_normal((126, 126))
        u = solve_poisson(f, config)
        worst = max(worst, stencil_residual(u, f))

    elapsed = perf_counter() - t0
    ok = min(orders.values()) >= 1.9 and worst <= 1e-8 and elapsed < 60.0
    _verdict(
        1,
        ok,
        f"orders cg={orders['cg']:.3f} dst={orders['dst']:.3f} (need >=1.9), "
        f"worst residual {worst:.2e} (need <=1e-8)",
        t0,
    )


# --- 02: patch-count table --------------------------------------------------

COUNT_TABLE = [
    ((8, 3), 1681),
    ((8, 4), 961),
    ((8, 5), 625),
    ((16, 6), 361),
    ((16, 8), 225),
    ((16, 10), 144),
    ((16, 12), 100),
    ((16, 14), 81),
    ((16, 16), 49),
    ((32, 20), 25),
    ((32, 32), 9),
    ((48, 40), 9),
    ((64, 64), 4),
]


def test_02_patch_count_table():
    """Layout construction reproduces the thirteen published (p, s) patch
    counts at D=128. Budget: under a second."""
    t0 = perf_counter()
    got = [make_layout(128, p, s).n_patches for (p, s), _ in COUNT_TABLE]
    want = [count for _, count in COUNT_TABLE]
    elapsed = perf_counter() - t0
    ok = got == want and elapsed < 1.0
    _verdict(2, ok, f"counts {got} == {want}", t0)


# --- 03: blend identity -----------------------------------------------------


def test_03_blend_partition_identity():
    """Hanning-window overlap-add reconstructs any field to 1e-12 for the
    half-overlap layouts. Budget: under ten seconds."""
    t0 = perf_counter()
    rng = np.random.default_rng(7)
    field = rng.standard_normal((128, 128))
    worst = 0.0
    for p, s in ((8, 4), (16, 8), (32, 16), (64, 32)):
        layout = make_layout(128, p, s)
        patches = extract_patches(field, layout)
        recon = assemble_patches(patches, hanning_window(p))
        worst = max(worst, float(np.max(np.abs(recon - field))))
    elapsed = perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10.0
    _verdict(3, ok, f"max blend identity error {worst:.2e} (need <=1e-12)", t0)


# --- 04: PCA properties -----------------------------------------------------


def test_04_pca_properties():
    """Orthonormal components, lossless full-variance round trip, minimal
    retained width at 0.99, and Eckart-Young dominance over 20 random
    projections on a 500-sample desk set. Budget: under two minutes."""
    t0 = perf_counter()
    rng = np.random.default_rng(17)

    # orthonormality and round trip on an anisotropic random matrix
    base = rng.standard_normal((160, 40)) * np.geomspace(1.0, 1e-3, 40)
    basis = fit_pca(base, variance_target=1.0)
    gram = basis.components @ basis.components.T
    ortho_err = float(np.max(np.abs(gram - np.eye(basis.k))))
    centered = base - basis.mean
    recon = (centered @ basis.components.T) @ basis.components + basis.mean
    round_trip = float(np.max(np.abs(recon - base)))

    # minimal width against a straight SVD oracle
    sub = rng.standard_normal((120, 30)) * np.geomspace(1.0, 1e-2, 30)
    singulars = np.linalg.svd(sub - sub.mean(axis=0), compute_uv=False)
    ratios = np.cumsum(singulars**2) / np.sum(singulars**2)
    want_k = int(np.searchsorted(ratios, 0.99 * (1.0 - 1e-12)) + 1)
    got_k = fit_pca(sub, variance_target=0.99).k
    ratio_at_k = float(ratios[got_k - 1])
    ratio_below = float(ratios[got_k - 2]) if got_k > 1 else 0.0

    # Eckart-Young on a 500-sample desk set of coefficient fields
    desk = np.stack([sample_grf(GrfParams(seed=23), 128, i) for i in range(500)])
    matrix = field_side_matrix(desk)
    desk_basis = fit_pca(matrix, variance_target=0.99)
    pca_err = reconstruction_mse(desk_basis, desk)
    centered = matrix - desk_basis.mean
    rand_errs = []
    for _ in range(20):
        q, _ = np.linalg.qr(rng.standard_normal((matrix.shape[1], desk_basis.k)))
        proj = centered @ q
        rand_errs.append(float(np.mean((centered - proj @ q.T) ** 2)))
    rand_min = min(rand_errs)

    elapsed = perf_counter() - t0
    ok = (
        ortho_err <= 1e-10
        and round_trip <= 1e-8
        and got_k == want_k
        and ratio_at_k >= 0.99
        and ratio_below < 0.99
        and all(pca_err < e for e in rand_errs)
        and elapsed < 120.0
    )
    _verdict(
        4,
        ok,
        f"ortho {ortho_err:.1e}, round trip {round_trip:.1e}, k {got_k}=={want_k}, "
        f"EY mse {pca_err:.3e} < best random {rand_min:.3e} (20 draws)",
        t0,
    )


# --- 05: gradient checks ----------------------------------------------------


def _loss_without_grads(model, x, y, l2):
    pred = model.forward(x)
    loss = float(np.mean((pred - y) ** 2))
    for p, _ in model.parameters():
        loss += l2 * float(np.sum(p * p))
    return loss


def _max_fd_error(model, x, y, l2, eps=1e-5):
    loss_and_grad(model, x, y, l2)
    analytic = [np.array(g, copy=True) for _, g in model.parameters()]
    worst = 0.0
    for (p, _), ga in zip(model.parameters(), analytic):
        flat, ga_flat = p.reshape(-1), ga.reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + eps
            up = _loss_without_grads(model, x, y, l2)
            flat[idx] = keep - eps
            down = _loss_without_grads(model, x, y, l2)
            flat[idx] = keep
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(ga_flat[idx] - fd) / max(abs(ga_flat[idx]), abs(fd), 1e-6))
    return worst


def _off_kink_biases(model, rng):
    # keeps ReLU pre-activations away from the kink where central
    # differences disagree with every valid subgradient
    for p, _ in model.parameters():
        if p.ndim == 1:
            p[...] = 0.3 * rng.standard_normal(p.size)


def test_05_gradient_checks():
    """Backprop matches central differences to 1e-4 relative error over 50
    random dense shapes and 50 random conv shapes. Budget: under a minute."""
    t0 = perf_counter()
    rng = np.random.default_rng(29)
    worst_dense = 0.0
    for _ in range(50):
        dims = [int(rng.integers(1, 7)) for _ in range(int(rng.integers(2, 5)))]
        model = make_mlp(dims, seed=int(rng.integers(10000)))
        _off_kink_biases(model, rng)
        b = int(rng.integers(1, 5))
        x = rng.standard_normal((b, dims[0]))
        y = rng.standard_normal((b, dims[-1]))
        l2 = float(rng.choice([0.0, 1e-3]))
        worst_dense = max(worst_dense, _max_fd_error(model, x, y, l2))

    worst_conv = 0.0
    for _ in range(50):
        k = int(rng.choice([1, 3, 5]))
        chans = [int(rng.integers(1, 4)) for _ in range(int(rng.integers(2, 4)))]
        model = make_cnn(chans, kernel_size=k, seed=int(rng.integers(10000)))
        _off_kink_biases(model, rng)
        b = int(rng.integers(1, 3))
        h = int(rng.integers(k, k + 3))
        x = rng.standard_normal((b, chans[0], h, h))
        y = rng.standard_normal((b, chans[-1], h, h))
        l2 = float(rng.choice([0.0, 1e-3]))
        worst_conv = max(worst_conv, _max_fd_error(model, x, y, l2))

    elapsed = perf_counter() - t0
    ok = worst_dense <= 1e-4 and worst_conv <= 1e-4 and elapsed < 60.0
    _verdict(
        5,
        ok,
        f"worst relative gradient error dense {worst_dense:.2e}, conv {worst_conv:.2e} "
        f"(need <=1e-4, 50 shapes each)",
        t0,
    )


# --- 09: metric self-consistency -------------------------------------------


def test_09_metric_self_consistency():
    """SSIM of a field with itself is exactly 1; radial spectra preserve the
    Parseval sum to 1e-8 relative; value histograms integrate to 1 within
    1e-10. Budget: under thirty seconds."""
    t0 = perf_counter()
    rng = np.random.default_rng(31)

    ssim_dev = 0.0
    for _ in range(5):
        a = rng.standard_normal((48, 48))
        ssim_dev = max(ssim_dev, abs(ssim(a, a) - 1.0))

    parseval = 0.0
    for _ in range(100):
        u = rng.standard_normal((64, 64))
        _, energies = energy_spectrum(u)
        total = float(np.sum(energies))
        direct = 64.0 * 64.0 * float(np.sum(u * u))
        parseval = max(parseval, abs(total - direct) / direct)

    pdf_dev = 0.0
    for _ in range(20):
        u = rng.standard_normal((32, 32))
        _, density, width = pdf_estimate(u, bins=48)
        pdf_dev = max(pdf_dev, abs(float(np.sum(density)) * width - 1.0))

    elapsed = perf_counter() - t0
    ok = ssim_dev == 0.0 and parseval <= 1e-8 and pdf_dev <= 1e-10 and elapsed < 30.0
    _verdict(
        9,
        ok,
        f"ssim self-dev {ssim_dev:.1e}, Parseval {parseval:.2e} (<=1e-8), "
        f"pdf mass dev {pdf_dev:.1e} (<=1e-10)",
        t0,
    )


# --- 10: end-to-end determinism --------------------------------------------


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_10_end_to_end_determinism(tmp_path):
    """Two identical seeded generate/fit/evaluate CLI runs with --threads 1
    produce byte-identical dataset, model, and report payloads."""
    t0 = perf_counter()
    digests = []
    for name in ("a", "b"):
        root = tmp_path / name
        data_dir, model_dir, eval_dir = root / "data", root / "model", root / "eval"
        assert cli_main([
            "generate", "--n", "48", "--grid", "32", "--seed", "7",
            "--method", "dst", "--threads", "1", "--out", str(data_dir),
        ]) == 0
        assert cli_main([
            "fit", "--dataset", str(data_dir / "dataset.ppca"),
            "--variant", "l2l-overlap", "--patch", "8", "--stride", "4",
            "--epochs", "30", "--batch-size", "8", "--hidden", "32",
            "--threads", "1", "--out", str(model_dir),
        ]) == 0
        assert cli_main([
            "evaluate", "--model", str(model_dir / "model.ppcm"),
            "--dataset", str(data_dir / "dataset.ppca"),
            "--threads", "1", "--out", str(eval_dir),
        ]) == 0
        digests.append({
            "dataset.ppca": _digest(data_dir / "dataset.ppca"),
            "model.ppcm": _digest(model_dir / "model.ppcm"),
            "report.json": _digest(eval_dir / "report.json"),
            "per_sample.csv": _digest(eval_dir / "per_sample.csv"),
            "spectrum.csv": _digest(eval_dir / "spectrum.csv"),
            "pdf.csv": _digest(eval_dir / "pdf.csv"),
        })
    mismatched = sorted(k for k in digests[0] if digests[0][k] != digests[1][k])
    elapsed = perf_counter() - t0
    ok = not mismatched and elapsed < 1200.0
    _verdict(
        10,
        ok,
        "all payloads byte-identical" if not mismatched else f"mismatch in {mismatched}",
        t0,
    )


# --- desk-scale comparison shared by 06, 07, 08 -----------------------------

DESK_SEED = 11
DESK_SAMPLES = 2000
DESK_RESOLUTION = 128
DESK_TRAIN = TrainConfig(
    batch_size=32,
    initial_lr=1e-3,
    l2_penalty=1e-4,
    epochs=500,
    plateau_patience=30,
    validation_fraction=0.1,
    seed=0,
)
DESK_PCA = dict(input_variance=0.999, output_variance=0.99999)
DESK_REFINER = RefinerSpec(
    channels=(16, 16),
    kernel_size=5,
    train=TrainConfig(
        batch_size=8,
        initial_lr=1e-3,
        l2_penalty=1e-4,
        epochs=25,
        plateau_patience=8,
        validation_fraction=0.1,
        seed=0,
    ),
)


def _desk_specs():
    shared = dict(hidden=(256, 256), train=DESK_TRAIN, **DESK_PCA)
    return {
        "global": VariantSpec(kind="global", **shared),
        "mosaic": VariantSpec(kind="l2l", patch_size=16, stride=16, **shared),
        "overlap": VariantSpec(
            kind="l2l", patch_size=16, stride=8, blend=True, **shared
        ),
        "refine": VariantSpec(
            kind="l2l", patch_size=16, stride=16, refiner=DESK_REFINER, **shared
        ),
    }


@pytest.fixture(scope="module")
def desk_runs():
    """Generate the desk dataset and fit all four comparison variants once.

    Returns per-variant fit timings, timed prediction on the shared test
    split, a metrics report, and per-sample seam scores on the p=16 mosaic
    grid lines.
    """
    wall_start = perf_counter()
    dataset = generate_dataset(
        DESK_SAMPLES,
        DESK_RESOLUTION,
        GrfParams(seed=DESK_SEED),
        SolverConfig(method="dst"),
        threads=1,
    )
    specs = _desk_specs()
    _, test_idx = split_indices(len(dataset), specs["global"])
    f_test = dataset.f[test_idx].astype(np.float64)
    u_test = dataset.u[test_idx].astype(np.float64)
    seam_layout = make_layout(DESK_RESOLUTION, 16, 16)

    runs = {}
    for label, spec in specs.items():
        model, timing = fit_pipeline(dataset, spec, threads=1)
        infer_start = perf_counter()
        preds = predict_fields(model, f_test)
        infer_seconds = perf_counter() - infer_start
        report, _ = report_from_fields(u_test, preds)
        seams = np.array([seam_discontinuity(p, seam_layout) for p in preds])
        runs[label] = {
            "timing": timing,
            "infer_seconds": infer_seconds,
            "report": report,
            "seams": seams,
        }
    runs["wall_seconds"] = perf_counter() - wall_start
    runs["n_test"] = len(test_idx)
    return runs


def test_06_desk_scale_accuracy(desk_runs):
    """With the published training recipe on 2000 samples at D=128, the
    blended half-overlap variant reaches test SSIM >= 0.98 and MSE <= 5e-7,
    and the global baseline reaches SSIM >= 0.97. Budget: two hours for the
    shared fits."""
    t0 = perf_counter()
    over = desk_runs["overlap"]["report"]
    glob = desk_runs["global"]["report"]
    wall = desk_runs["wall_seconds"]
    ok = (
        over.ssim >= 0.98
        and over.mse <= 5e-7
        and glob.ssim >= 0.97
        and wall < 7200.0
    )
    _verdict(
        6,
        ok,
        f"overlap ssim {over.ssim:.4f} (>=0.98) mse {over.mse:.2e} (<=5e-7); "
        f"global ssim {glob.ssim:.4f} (>=0.97); shared fits {wall:.0f}s",
        t0,
    )


def test_07_seam_ordering(desk_runs):
    """The plain mosaic shows a larger seam statistic than both the blended
    overlap variant and the refined variant on at least 90% of test samples."""
    t0 = perf_counter()
    mosaic = desk_runs["mosaic"]["seams"]
    overlap = desk_runs["overlap"]["seams"]
    refine = desk_runs["refine"]["seams"]
    frac_overlap = float(np.mean(mosaic > overlap))
    frac_refine = float(np.mean(mosaic > refine))
    ok = frac_overlap >= 0.9 and frac_refine >= 0.9
    _verdict(
        7,
        ok,
        f"mosaic seam exceeds overlap on {frac_overlap:.1%}, refined on "
        f"{frac_refine:.1%} of {desk_runs['n_test']} test samples (need >=90%)",
        t0,
    )


def test_08_pipeline_efficiency(desk_runs):
    """Patch-local variants cut total pipeline time (PCA + training +
    inference) to half the global baseline, and the PCA stage alone speeds
    up at least 3x for non-overlapping p=16 patches."""
    t0 = perf_counter()

    def total(label):
        return desk_runs[label]["timing"]["total"] + desk_runs[label]["infer_seconds"]

    def pca_stage(label):
        t = desk_runs[label]["timing"]
        return t["input_pca"] + t["output_pca"]

    base = total("global")
    ratios = {label: total(label) / base for label in ("mosaic", "overlap", "refine")}
    pca_speedup = pca_stage("global") / pca_stage("mosaic")
    ok = all(r <= 0.5 for r in ratios.values()) and pca_speedup >= 3.0
    _verdict(
        8,
        ok,
        "total/global " + " ".join(f"{k}={v:.2f}" for k, v in ratios.items())
        + f" (need <=0.50); pca speedup {pca_speedup:.1f}x (need >=3)",
        t0,
    )
