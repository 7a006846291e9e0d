"""Explaining the network with relevance propagation.

Backward-distributes the network output into per-pixel relevance scores with
the alpha-beta rule, audits the layer-wise conservation of the total, and
renders a diverging heatmap (warm = positive contribution, cool = negative).
"""

import os

from echostyle.data import synthetic_items
from echostyle.featnet import default_feature_network
from echostyle.lrp import LrpConfig, conservation_audit, propagate, render_heatmap

out_dir = os.path.join(os.path.dirname(__file__), "out", "relevance")
os.makedirs(out_dir, exist_ok=True)

net = default_feature_network()
img, label = synthetic_items(1, 16, seed=9)[0]

rmap = propagate(net, img, target="sum", cfg=LrpConfig(alpha=2.0, beta=1.0, epsilon=0.0))
print(f"explained output f(x) = {rmap.output_value:.6f} on a {label} image\n")
print("layer       relevance sum     relative gap")
for layer, total, gap in conservation_audit(rmap):
    print(f"{layer:9s}   {total:+.6e}   {gap:.2e}")

sidecar = render_heatmap(rmap, "input", os.path.join(out_dir, "heatmap.png"))
print(f"\nheatmap and raw values written to {out_dir}")
print(f"sidecar: {sidecar}")
