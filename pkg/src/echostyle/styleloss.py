"""Loss algebra for stylization.

Content loss, Gram-matrix style loss, the equivalent second-order polynomial
kernel (MMD) form, and the combined multi-reference loss in which per-layer
Gram targets are built by elementwise max over several reference images and
reshaped by histogram specification.

Feature maps at a layer are (N, H, W) activation tensors; N is the channel
count and M = H*W the number of spatial positions. The Gram matrix is the
N x N matrix of channel inner products over spatial positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import histmatch
from .featnet import CONTENT_LAYER, STYLE_LAYERS, Network, extract_features

__all__ = [
    "LossWeights",
    "ReferenceSet",
    "EquivalenceReport",
    "gram",
    "gram_is_valid",
    "content_loss",
    "content_loss_grad",
    "style_layer_loss",
    "style_layer_loss_grad",
    "style_loss",
    "mmd_poly2_style_loss",
    "combine_reference_grams",
    "multi_ref_gram",
    "multi_ref_targets",
    "multi_ref_style_loss",
    "proposed_style_loss",
    "proposed_style_grads",
    "total_loss",
    "kernel_expansion_check",
]


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total objective: alpha scales the content term, beta the
    style term, layer_weights the per-layer style contributions, and
    style_balance the overall scale of the combined multi-reference style
    loss (the content/style balance factor)."""

    alpha: float = 1.0
    beta: float = 1.0
    layer_weights: dict = field(default_factory=lambda: {l: 1.0 for l in STYLE_LAYERS})
    style_balance: float = 1.0
    content_layer: str = CONTENT_LAYER

    def __post_init__(self):
        vals = [self.alpha, self.beta, self.style_balance, *self.layer_weights.values()]
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"loss weights must be finite and >= 0, got {vals}")
        if not any(w > 0 for w in self.layer_weights.values()):
            raise ValueError("at least one style layer weight must be positive")


@dataclass
class ReferenceSet:
    """Ordered style reference images plus the target entry histogram used by
    histogram specification.

    histogram is one of:
      None            identity specification (combined Gram used as-is)
      "auto"          per layer, the average empirical entry-histogram of the
                      individual reference Grams (`bins` bins)
      (edges, masses) an explicit density histogram applied at every layer
    """

    images: list
    histogram: object = "auto"
    bins: int = 64

    def __post_init__(self):
        if len(self.images) < 1:
            raise ValueError("reference set needs at least one style image")
        if isinstance(self.histogram, tuple):
            histmatch.check_histogram(*self.histogram)
        elif self.histogram not in (None, "auto"):
            raise ValueError(f"unknown histogram mode {self.histogram!r}")

    @property
    def n(self) -> int:
        return len(self.images)


def _as_map(f: np.ndarray, name: str = "feature map") -> np.ndarray:
    """Reshape a (N,H,W) or (N,M) feature map to (N, M)."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 3:
        f = f.reshape(f.shape[0], -1)
    if f.ndim != 2 or f.size == 0:
        raise ValueError(f"{name}: expected nonempty (N,H,W) or (N,M), got shape {f.shape}")
    return f


def gram(f: np.ndarray) -> np.ndarray:
    """Channel inner-product matrix G = F F^T over spatial positions,
    symmetrized so the result is exactly symmetric."""
    a = _as_map(f)
    g = a @ a.T
    return (g + g.T) / 2.0


def gram_is_valid(g: np.ndarray, sym_tol: float = 1e-12, eig_tol: float = -1e-9) -> bool:
    """Check the Gram contract: symmetry and positive semi-definiteness."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        return False
    if np.abs(g - g.T).max() > sym_tol:
        return False
    return float(np.linalg.eigvalsh(g).min()) >= eig_tol


def _check_layer(stack_a: dict, stack_b: dict, layer: str):
    for stack, who in ((stack_a, "first"), (stack_b, "second")):
        if layer not in stack:
            raise ValueError(f"{who} feature stack is missing layer {layer!r}")
    a, b = stack_a[layer], stack_b[layer]
    if a.shape != b.shape:
        raise ValueError(
            f"layer {layer!r}: feature shapes {a.shape} and {b.shape} differ"
        )
    return a, b


def content_loss(f_hat: dict, f_c: dict, layer: str) -> float:
    """Half the summed squared difference of the two activation tensors."""
    a, b = _check_layer(f_hat, f_c, layer)
    d = a - b
    return 0.5 * float(np.sum(d * d))


def content_loss_grad(f_hat: dict, f_c: dict, layer: str) -> np.ndarray:
    """Gradient of content_loss w.r.t. the stylized activations."""
    a, b = _check_layer(f_hat, f_c, layer)
    return a - b


def style_layer_loss(g_hat: np.ndarray, g_ref: np.ndarray, n_l: int, m_l: int) -> float:
    """Normalized squared Gram discrepancy at one layer:
    sum((G_hat - G_ref)^2) / (4 n^2 m^2)."""
    g_hat = np.asarray(g_hat, dtype=np.float64)
    g_ref = np.asarray(g_ref, dtype=np.float64)
    if g_hat.shape != g_ref.shape:
        raise ValueError(f"Gram shapes {g_hat.shape} and {g_ref.shape} differ")
    d = g_hat - g_ref
    return float(np.sum(d * d)) / (4.0 * n_l * n_l * m_l * m_l)


def style_layer_loss_grad(f_hat_map: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Gradient of style_layer_loss w.r.t. the stylized feature map (N,M),
    with Gram G = F F^T: dE/dF = (G - G_ref) F / (n^2 m^2)."""
    a = _as_map(f_hat_map)
    n, m = a.shape
    d = gram(a) - np.asarray(g_ref, dtype=np.float64)
    return (d @ a) / (n * n * m * m)


def _layer_nm(f: np.ndarray):
    f = np.asarray(f)
    n = f.shape[0]
    m = int(np.prod(f.shape[1:])) if f.ndim > 1 else 1
    return n, m


def style_loss(f_hat: dict, f_s: dict, weights: LossWeights) -> float:
    """Weighted sum of per-layer Gram losses against a single style image."""
    total = 0.0
    for layer, w in weights.layer_weights.items():
        if w == 0:
            continue
        a, b = _check_layer(f_hat, f_s, layer)
        n, m = _layer_nm(a)
        total += w * style_layer_loss(gram(a), gram(b), n, m)
    return total


def _poly2_sum(a: np.ndarray, b: np.ndarray) -> float:
    """Sum over column pairs of the squared column inner products,
    sum_{k1,k2} (a_{.k1} . b_{.k2})^2, evaluated column-wise."""
    inner = a.T @ b
    return float(np.sum(inner * inner))


def _subsample_columns(f: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    idx = np.sort(rng.choice(f.shape[1], size=m, replace=False))
    return f[:, idx]


def mmd_poly2_style_loss(f_hat, f_s, n_l: int = None, m_l: int = None,
                         subsample_seed=None) -> float:
    """Style discrepancy as a squared maximum mean discrepancy with the
    second-order polynomial kernel k(x, y) = (x.y)^2 over spatial columns:

        MMD^2 = mean_k1k2 k(f_k1, f_k2) + mean k(s_k1, s_k2) - 2 mean k(f_k1, s_k2)

    scaled by 1/(4 n^2); identical column distributions give 0. Spatial sizes
    must match unless `subsample_seed` is set, in which case the larger map is
    subsampled to the smaller one with a seeded generator.
    """
    a = _as_map(f_hat, "stylized feature map")
    b = _as_map(f_s, "style feature map")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"channel counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        if subsample_seed is None:
            raise ValueError(
                f"spatial sizes differ ({a.shape[1]} vs {b.shape[1]}); pass "
                f"subsample_seed to subsample the larger map"
            )
        rng = np.random.default_rng(subsample_seed)
        m = min(a.shape[1], b.shape[1])
        a = a if a.shape[1] == m else _subsample_columns(a, m, rng)
        b = b if b.shape[1] == m else _subsample_columns(b, m, rng)
    n = n_l if n_l is not None else a.shape[0]
    m = m_l if m_l is not None else a.shape[1]
    mmd2 = (_poly2_sum(a, a) + _poly2_sum(b, b) - 2.0 * _poly2_sum(a, b)) / (m * m)
    return mmd2 / (4.0 * n * n)


def multi_ref_gram(refs: ReferenceSet, net: Network, layer: str) -> np.ndarray:
    """Per-layer style target: elementwise max over the references' Gram
    matrices, then histogram specification of the entry distribution. The
    upper triangle is mapped and mirrored, so the result stays symmetric."""
    return multi_ref_targets(refs, net, [layer])[layer]


def combine_reference_grams(grams: list, histogram="auto", bins: int = 64) -> np.ndarray:
    """Elementwise max over the references' Gram matrices, then histogram
    specification of the entries. histogram follows ReferenceSet: None for
    identity, "auto" for the averaged reference entry-histogram, or an
    explicit (edges, masses)."""
    if not grams:
        raise ValueError("no reference Gram matrices")
    combined = np.asarray(grams[0], dtype=np.float64)
    for g in grams[1:]:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != combined.shape:
            raise ValueError(f"Gram shapes differ: {combined.shape} vs {g.shape}")
        combined = np.maximum(combined, g)
    if histogram is None:
        return combined
    iu = np.triu_indices(combined.shape[0])
    if histogram == "auto":
        edges, masses = histmatch.average_histogram([g[iu] for g in grams], bins=bins)
    else:
        edges, masses = histogram
    mapped = histmatch.specify(combined[iu], edges, masses)
    out = np.zeros_like(combined)
    out[iu] = mapped
    out = out + out.T
    out[np.diag_indices(combined.shape[0])] /= 2.0
    return out


def multi_ref_targets(refs: ReferenceSet, net: Network, layers) -> dict:
    """Compute multi-reference Gram targets for several layers at once
    (each reference image is forwarded once)."""
    layers = list(layers)
    per_ref = [extract_features(net, img, layers) for img in refs.images]
    return {
        layer: combine_reference_grams(
            [gram(stack[layer]) for stack in per_ref], refs.histogram, refs.bins)
        for layer in layers
    }


def multi_ref_style_loss(f_hat: dict, refs: ReferenceSet, net: Network,
                         weights: LossWeights, targets: dict = None) -> float:
    """Weighted sum of Gram losses against the multi-reference targets."""
    if targets is None:
        targets = multi_ref_targets(refs, net, [l for l, w in weights.layer_weights.items() if w > 0])
    total = 0.0
    for layer, w in weights.layer_weights.items():
        if w == 0:
            continue
        if layer not in f_hat:
            raise ValueError(f"feature stack is missing style layer {layer!r}")
        a = f_hat[layer]
        n, m = _layer_nm(a)
        g = gram(a)
        if g.shape != targets[layer].shape:
            raise ValueError(
                f"layer {layer!r}: Gram {g.shape} vs target {targets[layer].shape}"
            )
        total += w * style_layer_loss(g, targets[layer], n, m)
    return total


def proposed_style_loss(f_hat: dict, refs: ReferenceSet, net: Network,
                        weights: LossWeights, targets: dict = None) -> float:
    """The combined style loss: per layer, the kernel-form discrepancy between
    the stylized features and the multi-reference Gram target (numerically the
    normalized squared Gram difference, to which the polynomial-kernel MMD
    expansion is equivalent), weighted per layer and scaled by the
    content/style balance factor."""
    return weights.style_balance * multi_ref_style_loss(f_hat, refs, net, weights, targets)


def proposed_style_grads(f_hat: dict, weights: LossWeights, targets: dict) -> dict:
    """Per-layer gradients of proposed_style_loss w.r.t. the stylized feature
    maps, shaped like the activations."""
    out = {}
    for layer, w in weights.layer_weights.items():
        if w == 0:
            continue
        a = f_hat[layer]
        g = style_layer_loss_grad(a, targets[layer])
        out[layer] = (weights.style_balance * w) * g.reshape(a.shape)
    return out


def total_loss(content_term: float, style_term: float, weights: LossWeights) -> float:
    """alpha * content + beta * style."""
    if not (np.isfinite(content_term) and np.isfinite(style_term)):
        raise ValueError(
            f"non-finite loss terms: content={content_term}, style={style_term}"
        )
    return weights.alpha * content_term + weights.beta * style_term


@dataclass(frozen=True)
class EquivalenceReport:
    gram_form: float
    kernel_form: float
    rel_gap: float


def kernel_expansion_check(f_hat, f_s) -> EquivalenceReport:
    """Evaluate the style discrepancy along two independent routes: the
    N x N Gram-difference form and the expanded M x M column-kernel sum
    (self terms of both maps minus twice the cross terms). Reports both
    values and their relative gap."""
    a = _as_map(f_hat, "stylized feature map")
    b = _as_map(f_s, "style feature map")
    if a.shape != b.shape:
        raise ValueError(f"feature shapes {a.shape} and {b.shape} differ")
    n, m = a.shape
    gram_form = style_layer_loss(gram(a), gram(b), n, m)
    kernel_form = (_poly2_sum(a, a) + _poly2_sum(b, b) - 2.0 * _poly2_sum(a, b)) \
        / (4.0 * n * n * m * m)
    scale = max(abs(gram_form), abs(kernel_form))
    gap = 0.0 if scale == 0 else abs(gram_form - kernel_form) / scale
    return EquivalenceReport(gram_form, kernel_form, gap)
