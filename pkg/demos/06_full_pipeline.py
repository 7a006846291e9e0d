"""The end-to-end pipeline at desk scale.

Generates a synthetic two-class corpus, despeckles it, stylizes the training
split against per-class reference sets, explains one content image, trains
the classifier before and after augmentation, and prints the metric deltas.
Every parameter, artifact and metric lands in one deterministic manifest.
"""

import os

from echostyle.classify import TrainConfig
from echostyle.pipeline import PipelineConfig, run_pipeline
from echostyle.srad import SradParams

out_root = os.path.join(os.path.dirname(__file__), "out", "pipeline")

cfg = PipelineConfig(
    out_root=out_root,
    per_class=12,
    image_size=16,
    seed=0,
    nst_iterations=80,
    style_balance=1e3,
    srad_params=SradParams(iterations_per_scale=5, scales=4),
    train_cfg=TrainConfig(epochs=12, patience=12, lr=0.02, batch_size=16),
    benchmark=True,
    bench_workers=(1, 2),
    bench_images=2,
    bench_iterations=10,
    bench_size=16,
)
report = run_pipeline(cfg)

print(f"manifest: {report.manifest_path}\n")
print("pre-augmentation :", " ".join(report.pre_metrics.as_lines()[:2]))
print("post-augmentation:", " ".join(report.post_metrics.as_lines()[:2]))
print("\nmetric deltas (post - pre):")
for name, delta in report.deltas.items():
    print(f"  {name:12s} {'undefined' if delta is None else f'{delta:+.4f}'}")
print(f"\naugmented outputs: {report.value('augment.outputs')} "
      f"(expected {report.value('augment.expected_outputs')})")
print(f"benchmark table: {os.path.join(out_root, 'benchmark.txt')}")
