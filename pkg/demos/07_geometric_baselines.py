"""Geometric baseline augmenters: rotation, scaling, flipping.

The conventional comparators for the style-transfer pipeline: each input
yields five variants (three rotations, one scale, one flip).
"""

import os

from echostyle.data import geometric_variants, synthetic_items
from echostyle.image import write_pgm

out_dir = os.path.join(os.path.dirname(__file__), "out", "geometric")
os.makedirs(out_dir, exist_ok=True)

img, label = synthetic_items(1, 32, seed=6)[0]
write_pgm(os.path.join(out_dir, "original.pgm"), img)

variants = geometric_variants(img)
for name, out in variants.items():
    write_pgm(os.path.join(out_dir, f"{name}.pgm"), out)
    print(f"{name:9s} mean {out.mean():.4f}  range [{out.min():.3f}, {out.max():.3f}]")

print(f"\n1 input -> {len(variants)} variants; written to {out_dir}")
