"""Smoke test for the despeckle_py extension module."""

import math

import despeckle_py as dp


def main():
    clean = dp.synthetic_shapes(8, 32, seed=3)
    assert len(clean) == 8 and clean[0].height == 32

    spec = dp.NoiseSpec(0.2)
    noisy, alpha = dp.synth_speckle(clean[0], spec, seed=1)
    assert alpha == 0.2
    assert noisy.clean is not None
    print(f"noisy psnr: {dp.psnr(noisy, clean[0]):.2f} dB")

    flat = dp.Image(16, 16, [0.5] * 256)
    y, _ = dp.synth_speckle(flat, spec, seed=7)
    sigma = dp.adaptive_sigma(y)
    assert 0.01 <= sigma <= 0.5
    assert dp.noise_mixture([1.0, 2.0], 0.0, seed=4) == [1.0, 2.0]

    lee = dp.baseline_filter(noisy, "lee")
    assert math.isfinite(dp.psnr(lee, clean[0]))

    observations = [dp.synth_speckle(c, spec, seed=i)[0] for i, c in enumerate(clean)]
    model, history = dp.fit(observations, widths=[4, 8, 12, 16], epochs=2, batch_size=4, seed=0)
    assert len(history) == 2
    restored = model.denoise(noisy)
    assert (restored.height, restored.width) == (32, 32)
    assert all(math.isfinite(v) for v in restored.values)
    c, h, w, z = model.encode(noisy)
    assert (c, h, w) == (4, 32, 32) and len(z) == c * h * w
    print(f"parameters: {model.parameter_count}, restored psnr: {dp.psnr(restored, clean[0]):.2f} dB")
    print("ok")


if __name__ == "__main__":
    main()
