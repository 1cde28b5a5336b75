"""The four training objectives and how they combine.

The mask loss is a class-weighted cross-entropy: with 10% robot pixels the
foreground weight is 10, so a mask that is all background no longer looks good.

    python demos/03_losses.py
"""

import math

import numpy as np

from armsight.losses import ClassWeights, LossWeights, class_weights, mask_loss, type_loss, weighted_final

gt = np.zeros((20, 20))
gt[5:9, 5:15] = 1  # 40 of 400 pixels, 10%
w = class_weights(gt)
print(f"class weights at 10% foreground: w_fg={w.w_fg:.3f} w_bg={w.w_bg:.3f}")

all_bg = np.full_like(gt, 0.01)
half = np.full_like(gt, 0.5)
print(f"mask loss, everything background: {mask_loss(all_bg, gt, w)[0]:.3f}")
print(f"mask loss, undecided 0.5 everywhere: {mask_loss(half, gt, w)[0]:.3f}")
print(f"unweighted, everything background: {mask_loss(all_bg, gt, ClassWeights(1.0, 1.0, 0.5))[0]:.3f}")

uniform = np.full(3, 1 / 3)
print(f"\ntype loss of a uniform guess: {type_loss(uniform, np.array([1.0, 0, 0]))[0]:.6f}"
      f" (ln 3 = {math.log(3):.6f})")

weights = LossWeights(1.0, 1.5, 1.5, 0.3)
print(f"combined loss with every component at 1: {weighted_final((1, 1, 1, 1), weights)}")
