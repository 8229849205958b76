"""
The two feature-space losses
============================

The training objective adds two terms to pixel error. Both are computed
on features from a frozen extractor:

* a squared distance between each original and its reconstruction, pair by pair;
* an MMD between the two feature *sets* in a batch.

The pairwise term sees each image alone. The MMD term only cares whether
the reconstructed batch looks like the original batch as a whole. The
cells below show how each reacts to a few kinds of damage.
"""

import numpy as np
import torch

from discernible.mmd import KernelMixture, median_distance, mmd_squared
from discernible.perceptual import Classifier, FeatureExtractor, perceptual_loss

torch.manual_seed(0)

###############################################################################
# MMD on plain vectors first. The median-ladder mixture spreads eight
# bandwidths around the median pairwise distance of X, from sigma_med/8
# up to 16 * sigma_med.

X = torch.randn(64, 16, dtype=torch.float64)
km = KernelMixture.median_ladder(median_distance(X))
print("bandwidths", np.round(km.bandwidths, 3))

for name, Y in [
    ("same set, shuffled", X[torch.randperm(64)]),
    ("fresh sample, same law", torch.randn(64, 16, dtype=torch.float64)),
    ("mean shift 0.5", torch.randn(64, 16, dtype=torch.float64) + 0.5),
    ("variance x4", 2 * torch.randn(64, 16, dtype=torch.float64)),
    ("collapsed to the mean", X.mean(0, keepdim=True).repeat(64, 1)),
]:
    print(f"{name:<24} MMD^2 = {float(mmd_squared(X, Y, km)):.4f}")

###############################################################################
# Shuffling gives exactly zero, because the estimator only sees multisets.
# Collapsing every reconstruction onto the mean is heavily penalised. A
# blurry codec does roughly that in feature space: every image ends up
# looking like the same grey average.
#
# Now the pairwise term, through an (untrained) extractor.

fx = FeatureExtractor.from_classifier(Classifier("plain5", seed=0))
x = torch.rand(8, 3, 32, 32)
blur = torch.nn.functional.avg_pool2d(x, 4).repeat_interleave(4, 2).repeat_interleave(4, 3)
print("perceptual(x, x)      ", float(perceptual_loss(fx, x, x)))
print("perceptual(x, blur x) ", round(float(perceptual_loss(fx, x, blur)), 4))
print("perceptual(x, shuffle)", round(float(perceptual_loss(fx, x, x[torch.randperm(8)])), 4))
with torch.no_grad():
    fx_x, fx_b = fx(x), fx(blur)
    med = median_distance(fx_x)
print("MMD^2 originals vs blurred", round(float(mmd_squared(fx_x, fx_b, KernelMixture.median_ladder(med))), 4))
