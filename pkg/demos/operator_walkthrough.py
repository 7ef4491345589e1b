"""What one DHiF layer does to one image, step by step.

Builds a synthetic scene, collapses and standardises it, generates the
per-location filter bank, and shows that the layer falls back to an ordinary
convolution when the projection is zero.  Runs in a second or two.
"""
import numpy as np

from dhif import (
    DhifParams,
    SceneSpec,
    SeededRng,
    collapse_normalize,
    conv2d_forward,
    dhif_forward,
    generate_filter_bank,
    generate_scene,
)
from dhif.freq import bank_kernels, kernel_gains


def main():
    image, mask = generate_scene(SceneSpec(seed=7))
    x = np.repeat(image[None], 4, axis=1)  # 1 x 4 x 64 x 64, four identical channels
    print(f"scene: {image.shape[-2]}x{image.shape[-1]}, {int(mask.sum())} target pixels")

    f_norm, _ = collapse_normalize(x)
    print(f"normalised map: mean {f_norm.mean():+.2e}, std {f_norm.std():.4f}")

    rng = SeededRng(3)
    p = DhifParams.init(rng, 4, 8, 3)
    print(f"zero projection: max |dhif - conv| = "
          f"{np.abs(dhif_forward(x, p)[0] - conv2d_forward(x, p.out_conv)[0]).max():.1e}")

    p.projection[...] = rng.normal(p.projection.size, std=0.5).reshape(p.projection.shape)
    bank = generate_filter_bank(f_norm[0], p)
    print(f"filter bank: {bank.kernels.shape} (rows, cols, k^2, k^2), "
          f"coefficients in [{bank.kernels.min():+.3f}, {bank.kernels.max():+.3f}]")

    # unlike a fixed kernel, the filters change with the local content
    cy, cx = np.argwhere(mask).mean(axis=0).round().astype(int)
    at_target, at_corner = bank.kernels[cy, cx], bank.kernels[2, 2]
    print(f"bank at target centre ({cy},{cx}) vs at (2,2): "
          f"max coefficient difference {np.abs(at_target - at_corner).max():.3f}")
    dc = kernel_gains(bank_kernels(bank))["dc_gain"]
    print(f"dc gain across all {dc.size} generated kernels: median {np.median(dc):.3f}, max {dc.max():.3f}")

    y, _ = dhif_forward(x, p)
    print(f"layer output: {y.shape}, range [{y.min():+.3f}, {y.max():+.3f}]")


if __name__ == "__main__":
    main()
