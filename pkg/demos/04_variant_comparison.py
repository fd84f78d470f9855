"""Train two small surrogate variants and compare their test metrics.

A deliberately small run: 150 samples at D=32 and a short schedule, enough
to show the moving parts end to end. The global variant maps whole-field
latent codes through one network; the patch-local variant maps concatenated
per-patch codes and blends overlapping output patches back together.
"""

import numpy as np

from patchpca import (
    GrfParams,
    SolverConfig,
    TrainConfig,
    VariantSpec,
    evaluate,
    fit_pipeline,
    generate_dataset,
    make_layout,
    predict_fields,
    seam_discontinuity,
    split_indices,
)


def main():
    print("generating 150 samples at D=32 ...")
    ds = generate_dataset(150, 32, GrfParams(seed=21), SolverConfig(method="dst"))
    schedule = TrainConfig(batch_size=16, epochs=400, validation_fraction=0.1, seed=0)

    variants = {
        "global": VariantSpec(kind="global", hidden=(64, 64), train=schedule),
        "patch, blended": VariantSpec(
            kind="l2l", patch_size=8, stride=4, blend=True,
            hidden=(64, 64), train=schedule,
        ),
    }

    models = {}
    for name, spec in variants.items():
        model, timing = fit_pipeline(ds, spec)
        models[name] = model
        print(f"\n{name}: latent {model.latent_in} -> {model.latent_out}")
        print(f"  stage seconds: " + ", ".join(
            f"{k} {v:.2f}" for k, v in timing.items() if k != "total"))

    print("\ntest-split metrics")
    print(f"{'variant':>16} {'mse':>10} {'mae':>10} {'ssim':>7}")
    for name, model in models.items():
        report, _ = evaluate(model, ds, split="test")
        print(f"{name:>16} {report.mse:>10.2e} {report.mae:>10.2e} {report.ssim:>7.4f}")

    # seams on the patch grid lines, averaged over the test split
    spec = variants["patch, blended"]
    _, test_idx = split_indices(len(ds), spec)
    grid = make_layout(32, 8, 8)
    for name, model in models.items():
        preds = predict_fields(model, ds.f[test_idx].astype(np.float64))
        seam = np.mean([seam_discontinuity(p, grid) for p in preds])
        print(f"mean seam score, {name}: {seam:+.5f}")


if __name__ == "__main__":
    main()
