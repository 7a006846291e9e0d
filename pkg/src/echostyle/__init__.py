"""echostyle: explainable style-transfer augmentation for speckled ultrasound
images.

Submodules:

- tensor     dense conv/pool/elementwise arithmetic (float64, CHW layout)
- image      image contract and PGM/PNG/PPM I/O
- featnet    seeded convolutional feature network with manual backprop
- histmatch  histogram specification (monotone CDF remapping)
- styleloss  content, Gram, kernel-MMD and multi-reference style losses
- engine     iterative stylization and batch augmentation
- lrp        relevance propagation (alpha-beta rule) and heatmaps
- srad       speckle-reducing anisotropic diffusion, multiscale series
- distrib    ring all-reduce data-parallel training harness
- classify   classifier head, training protocol, metric suite
- data       dataset ingestion, synthetic corpus, geometric augmenters
- pipeline   end-to-end orchestration with a reproducible run manifest
"""

__version__ = "0.1.0"
