"""The two faces of the style loss.

The squared Gram-matrix discrepancy and the second-order polynomial-kernel
discrepancy (a squared maximum mean discrepancy over feature columns) are
the same number computed along different routes. This script evaluates both
on random feature maps, then walks the reduction chain on real network
features: combined multi-reference loss with a single reference and identity
histogram specification -> kernel form -> Gram form.
"""

import numpy as np

from echostyle.data import synthetic_items
from echostyle.featnet import default_feature_network
from echostyle.styleloss import (
    LossWeights,
    ReferenceSet,
    gram,
    kernel_expansion_check,
    mmd_poly2_style_loss,
    proposed_style_loss,
    style_layer_loss,
)

rng = np.random.default_rng(0)
print("random feature-map pairs: Gram form vs kernel expansion")
worst = 0.0
for trial in range(8):
    n, m = int(rng.integers(2, 5)), int(rng.integers(3, 10))
    rep = kernel_expansion_check(rng.normal(size=(n, m)), rng.normal(size=(n, m)))
    worst = max(worst, rep.rel_gap)
    print(f"  N={n} M={m}: gram {rep.gram_form:.8e}  kernel {rep.kernel_form:.8e}"
          f"  gap {rep.rel_gap:.2e}")
print(f"worst relative gap: {worst:.2e}\n")

net = default_feature_network()
items = synthetic_items(2, 16, seed=4)
content, ref = items[0][0], items[1][0]
f_hat, f_ref = net.forward(content), net.forward(ref)

print("reduction chain on network features (single reference, identity H):")
for layer in ("relu1", "relu2", "res3", "relu4"):
    w = LossWeights(layer_weights={layer: 1.0})
    combined = proposed_style_loss(f_hat, ReferenceSet([ref], histogram=None), net, w)
    a = f_hat[layer].reshape(f_hat[layer].shape[0], -1)
    b = f_ref[layer].reshape(f_ref[layer].shape[0], -1)
    kernel = mmd_poly2_style_loss(a, b)
    gram_form = style_layer_loss(gram(a), gram(b), a.shape[0], a.shape[1])
    print(f"  {layer:6s} combined {combined:.10e}  kernel {kernel:.10e}  "
          f"gram {gram_form:.10e}")
