"""Time the patch-size tradeoff on a small synthetic dataset.

Reproduces the shape of the cost story: as patches shrink, the per-patch
PCA problems get tiny and the fit stage accelerates, while the patch count
and latent width grow. Timings are medians over repeated runs and carry a
machine descriptor so saved records stay comparable.
"""

from patchpca import GrfParams, SolverConfig, generate_dataset
from patchpca.bench import bench_patch_tradeoff, machine_descriptor


def main():
    print("machine:", machine_descriptor())
    print("generating 64 samples at D=64 ...")
    ds = generate_dataset(64, 64, GrfParams(seed=13), SolverConfig(method="dst"))

    pairs = [(8, 8), (16, 8), (16, 16), (32, 32)]
    records, table = bench_patch_tradeoff(dataset=ds, pairs=pairs, repetitions=3)

    print(f"\n{'p':>4} {'s':>4} {'patches':>8} {'extract s':>10} {'bank fit s':>11}")
    for row in table:
        print(
            f"{row['patch_size']:>4} {row['stride']:>4} {row['n_patches']:>8} "
            f"{row['extraction_seconds']:>10.4f} {row['bank_fit_seconds']:>11.3f}"
        )

    by_stage = {}
    for record in records:
        by_stage.setdefault(record.stage, []).append(record.wall_seconds)
    print("\nmedian seconds by stage over all cases:")
    for stage, vals in sorted(by_stage.items()):
        mid = sorted(vals)[len(vals) // 2]
        print(f"  {stage:>12}: {mid:.3f}")


if __name__ == "__main__":
    main()
