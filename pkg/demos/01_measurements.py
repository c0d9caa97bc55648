"""
Lossy measurements and what they keep
=====================================

Each measurement family corrupts an image with a random parameter Θ. This
script applies every family to one rectangle and prints the result, then
asks the two uniqueness diagnostics whether the signal distribution is
recoverable.
"""

# %%
import numpy as np

from hidden_ambient import measurements as meas
from hidden_ambient.data import synth_rectangles_dataset
from hidden_ambient.measurements import MeasurementSpec
from hidden_ambient.numeric import make_rng

rng = make_rng(0)
x = synth_rectangles_dataset(1, 16, 16, rng)[0]


def show(img):
    for row in np.asarray(img):
        print("".join(" .:-=+*#%@"[min(9, max(0, int(round(v * 9))))] for v in row))
    print()


show(x)

# %% every family once
for spec in (MeasurementSpec("block_pixel", p=0.5), MeasurementSpec("block_patch", k=6),
             MeasurementSpec("keep_patch", k=8), MeasurementSpec("extract_patch", k=8),
             MeasurementSpec("convolve_noise", noise_std=0.05)):
    theta = meas.sample_theta(spec, x.shape, rng)
    print(spec.kind)
    show(meas.apply_measurement(theta, x))

# %% the same mask acts on every channel of a hidden map
h = rng.uniform(0.1, 1.0, (8, 8, 8))
theta = meas.sample_theta(MeasurementSpec("block_pixel", p=0.5), h.shape, rng)
zeroed = meas.apply_measurement(theta, h) == 0
print("zero pattern identical across channels:", bool((zeroed == zeroed[0]).all()))

# %% uniqueness: how often is f_Θ(x) == x?
positive = lambda r: r.uniform(0.01, 1.0, (4, 4))
for spec in (MeasurementSpec("identity"), MeasurementSpec("block_pixel", p=0.05),
             MeasurementSpec("block_pixel", p=0.95)):
    rep = meas.identity_probability_estimate(spec, positive, 2000, rng)
    label = spec.kind if spec.kind == "identity" else f"{spec.kind} p={spec.p}"
    print(f"{label:18s} P(identity) ~ {rep.identity_probability_estimate:.4f} "
          f"+- {rep.half_width:.4f}")

# %% exact channels on tiny binary images
for p in (0.5, 1.0):
    ch = meas.build_channel_matrix(MeasurementSpec("block_pixel", p=p), meas.binary_images((1, 2)))
    print(f"block_pixel p={p}: {ch.matrix.shape[0]} inputs -> {ch.matrix.shape[1]} outputs, "
          f"injective={meas.injectivity_test(ch)}")
