"""Layer-wise relevance propagation through the feature network.

Relevance flows backward from a chosen output, layer by layer, to the pixels.
Conv and dense layers use the alpha-beta rule: positive and negative weighted
contributions are normalized separately and recombined as alpha * pos -
beta * neg, with alpha - beta = 1 so each neuron redistributes exactly the
relevance it received. Average pooling redistributes in proportion to each
cell's contribution to the window sum, max pooling winner-take-all (ties
split equally), and residual junctions split relevance proportionally to
each branch's contribution. Bias terms receive no relevance; denominators
exclude them, so the per-layer sum is conserved.

A denominator that is exactly zero is stabilized by epsilon (with the
denominator's sign); with epsilon = 0 such a case raises instead, since the
messages would be 0/0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .featnet import LayerSpec, Network
from .image import write_png, write_ppm
from .tensor import conv2d, conv2d_backward, _max_pool_mask

__all__ = [
    "LrpConfig",
    "RelevanceMap",
    "lrp_dense",
    "lrp_conv",
    "lrp_pool",
    "propagate",
    "propagate_from",
    "conservation_audit",
    "relevance_to_rgb",
    "render_heatmap",
    "read_sidecar",
]


@dataclass(frozen=True)
class LrpConfig:
    alpha: float = 2.0
    beta: float = 1.0
    epsilon: float = 1e-9

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.epsilon < 0:
            raise ValueError(f"alpha, beta, epsilon must be >= 0: {self}")
        if abs(self.alpha - self.beta - 1.0) > 1e-12:
            raise ValueError(
                f"alpha - beta must equal 1 (conservation), got {self.alpha} - {self.beta}"
            )


@dataclass
class RelevanceMap:
    """Per-layer relevance tensors (shapes mirror the activations), ordered
    from the seeded layer down to "input" (the pixels), plus the explained
    output value."""

    output_value: float
    layers: dict

    @property
    def pixel_relevance(self) -> np.ndarray:
        return self.layers["input"]


def _safe_ratio(r: np.ndarray, z: np.ndarray, eps: float, what: str) -> np.ndarray:
    """r / (z + eps*sign(z)); zero z with eps=0 raises unless the relevance
    there is zero too (dead neurons pass through as 0)."""
    if eps > 0:
        sign = np.where(z >= 0, 1.0, -1.0)
        return r / (z + eps * sign)
    zero = z == 0
    if np.any(zero & (r != 0)):
        raise ZeroDivisionError(
            f"zero {what} denominator with epsilon=0; set epsilon > 0 to stabilize"
        )
    out = np.zeros_like(r)
    np.divide(r, z, out=out, where=~zero)
    return out


def _split_signs(a: np.ndarray):
    return np.maximum(a, 0.0), np.minimum(a, 0.0)


def lrp_conv(x: np.ndarray, weight: np.ndarray, relevance: np.ndarray, cfg: LrpConfig,
             stride: int = 1, padding: int = 0) -> np.ndarray:
    """Alpha-beta redistribution through a conv layer. `x` is the layer input,
    `relevance` the upstream relevance at the layer output."""
    if relevance.shape != conv_out_shape(x, weight, stride, padding):
        raise ValueError(
            f"upstream relevance shape {relevance.shape} does not match conv output "
            f"{conv_out_shape(x, weight, stride, padding)}"
        )
    xp, xn = _split_signs(np.asarray(x, dtype=np.float64))
    wp, wn = _split_signs(np.asarray(weight, dtype=np.float64))
    out = np.zeros_like(xp)
    for coef, pairs in (
        (cfg.alpha, ((xp, wp), (xn, wn))),   # positive contributions a*w > 0
        (-cfg.beta, ((xp, wn), (xn, wp))),   # negative contributions a*w < 0
    ):
        if coef == 0:
            continue
        z = sum(conv2d(xa, wa, None, stride, padding) for xa, wa in pairs)
        s = _safe_ratio(relevance, z, cfg.epsilon,
                        "positive" if coef > 0 else "negative")
        acc = np.zeros_like(xp)
        for xa, wa in pairs:
            gx, _, _ = conv2d_backward(xa, wa, s, stride, padding)
            acc += xa * gx
        out += coef * acc
    return out


def conv_out_shape(x, weight, stride, padding):
    c, h, w = np.asarray(x).shape
    o, _, kh, kw = np.asarray(weight).shape
    return (o, (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1)


def lrp_dense(x: np.ndarray, weight: np.ndarray, relevance: np.ndarray,
              cfg: LrpConfig) -> np.ndarray:
    """Alpha-beta redistribution through a dense layer (input flattened)."""
    flat = np.asarray(x, dtype=np.float64).ravel()
    weight = np.asarray(weight, dtype=np.float64)
    relevance = np.asarray(relevance, dtype=np.float64).ravel()
    if weight.shape != (relevance.size, flat.size):
        raise ValueError(
            f"dense weight {weight.shape} does not map input {flat.size} "
            f"to relevance {relevance.size}"
        )
    contrib = weight * flat[None, :]          # (out, in) contributions a_i w_ji
    cp, cn = _split_signs(contrib)
    out = np.zeros_like(flat)
    for coef, part in ((cfg.alpha, cp), (-cfg.beta, cn)):
        if coef == 0:
            continue
        z = part.sum(axis=1)
        s = _safe_ratio(relevance, z, cfg.epsilon,
                        "positive" if coef > 0 else "negative")
        out += coef * (part.T @ s)
    return out.reshape(np.asarray(x).shape)


def lrp_pool(x: np.ndarray, window: int, mode: str, relevance: np.ndarray,
             cfg: LrpConfig = LrpConfig()) -> np.ndarray:
    """Pooling redistribution. Max pooling routes to the argmax (ties split
    equally). Average pooling splits in proportion to each cell's
    contribution to the window sum -- uniform on constant regions, and zero
    to dead cells, which keeps every downstream denominator nondegenerate
    (a uniform split would park relevance on zero activations, where the
    conv and residual rules cannot conserve it). Both modes conserve the sum.
    """
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(relevance, dtype=np.float64)
    g = np.repeat(np.repeat(r, window, axis=1), window, axis=2)
    if mode == "avg":
        c, h, w = x.shape
        sums = x.reshape(c, h // window, window, w // window, window).sum(axis=(2, 4))
        share = _safe_ratio(r, sums, cfg.epsilon, "pool window")
        return x * np.repeat(np.repeat(share, window, axis=1), window, axis=2)
    if mode == "max":
        return g * _max_pool_mask(x, window)
    raise ValueError(f"lrp_pool: unknown mode {mode!r}")


def _lrp_global_pool(x_shape, relevance: np.ndarray) -> np.ndarray:
    c, h, w = x_shape
    return np.broadcast_to(
        np.asarray(relevance, dtype=np.float64).reshape(c, 1, 1) / (h * w), (c, h, w)
    ).copy()


def _lrp_residual(net: Network, spec: LayerSpec, cache: dict, relevance: np.ndarray,
                  cfg: LrpConfig) -> np.ndarray:
    """Split relevance between the skip branch and the body proportionally to
    each branch's contribution per element, then push the body share back
    through the body layers."""
    x, h = cache["x"], cache["body_out"]
    share = _safe_ratio(relevance, x + h, cfg.epsilon, "residual")
    r_skip = x * share
    r_body = h * share
    for inner, c in zip(reversed(spec.body), reversed(cache["body_caches"])):
        r_body = _layer_rule(net, inner, c, r_body, cfg)
    return r_skip + r_body


def _layer_rule(net: Network, spec: LayerSpec, cache: dict, relevance: np.ndarray,
                cfg: LrpConfig) -> np.ndarray:
    if np.any(~np.isfinite(relevance)):
        raise ValueError(f"non-finite relevance entering layer {spec.name!r}")
    if spec.kind == "conv":
        return lrp_conv(cache["x"], net.params[spec.name]["weight"], relevance, cfg,
                        spec.stride, spec.padding)
    if spec.kind == "activation":
        return relevance
    if spec.kind == "pool":
        return lrp_pool(cache["x"], spec.window, spec.mode, relevance, cfg)
    if spec.kind == "residual":
        return _lrp_residual(net, spec, cache, relevance, cfg)
    if spec.kind == "global-pool":
        return _lrp_global_pool(cache["x_shape"], relevance)
    if spec.kind == "dense":
        return lrp_dense(cache["x"], net.params[spec.name]["weight"], relevance, cfg)
    if spec.kind == "softmax":
        # relevance is seeded at the logits; softmax itself is transparent
        return relevance
    raise ValueError(f"no relevance rule for layer kind {spec.kind!r}")


def propagate_from(net: Network, image: np.ndarray, layer: str,
                   seed_relevance: np.ndarray, cfg: LrpConfig = LrpConfig()) -> RelevanceMap:
    """Propagate a custom relevance seed placed at `layer` down to the pixels.
    The explained value is the seed's sum."""
    stack, caches = net.forward_cache(image)
    if layer not in stack:
        raise ValueError(f"unknown layer id {layer!r}; have {list(stack)}")
    seed = np.asarray(seed_relevance, dtype=np.float64)
    if seed.shape != stack[layer].shape:
        raise ValueError(
            f"seed relevance shape {seed.shape} != activation shape {stack[layer].shape}"
        )
    layers = {layer: seed}
    r = seed
    start = net.layer_names.index(layer)
    for spec, cache in zip(reversed(net.specs[:start + 1]), reversed(caches[:start + 1])):
        r = _layer_rule(net, spec, cache, r, cfg)
        below = net.layer_names.index(spec.name) - 1
        key = net.layer_names[below] if below >= 0 else "input"
        layers[key] = r
    return RelevanceMap(float(seed.sum()), layers)


def propagate(net: Network, image: np.ndarray, target="sum",
              cfg: LrpConfig = LrpConfig()) -> RelevanceMap:
    """Explain a network output.

    target "sum" explains the sum of the final activations (each output unit
    seeds its own value); an integer k explains output unit k of the final
    pre-softmax vector (its logit seeds the propagation).
    """
    stack, _ = net.forward_cache(image)
    names = net.layer_names
    seed_layer = names[-1]
    if net.specs[-1].kind == "softmax":
        seed_layer = names[-2]
    acts = stack[seed_layer]
    if target == "sum":
        seed = acts.copy()
    else:
        k = int(target)
        flat = acts.ravel()
        if not 0 <= k < flat.size:
            raise ValueError(f"output id {k} out of range for {flat.size} outputs")
        seed = np.zeros_like(flat)
        seed[k] = flat[k]
        seed = seed.reshape(acts.shape)
    return propagate_from(net, image, seed_layer, seed, cfg)


def conservation_audit(rmap: RelevanceMap):
    """Per-layer relevance sums and their relative gap to the explained
    output value; returns a list of (layer, sum, rel_gap) from top to pixels."""
    f = rmap.output_value
    scale = max(abs(f), 1e-300)
    return [
        (name, float(r.sum()), abs(float(r.sum()) - f) / scale)
        for name, r in rmap.layers.items()
    ]


# ------------------------------------------------------------- heatmaps

def relevance_to_rgb(rel: np.ndarray) -> np.ndarray:
    """Diverging colormap: positive relevance warm (red), negative cool
    (blue), zero neutral white. Normalized by the max magnitude."""
    rel = np.asarray(rel, dtype=np.float64)
    if rel.ndim == 3:
        rel = rel.sum(axis=0)
    if rel.ndim == 1:
        rel = rel[None, :]
    peak = np.abs(rel).max()
    v = rel / peak if peak > 0 else np.zeros_like(rel)
    rgb = np.empty(rel.shape + (3,), dtype=np.float64)
    pos, neg = np.clip(v, 0, 1), np.clip(-v, 0, 1)
    rgb[..., 0] = 1.0 - neg          # red keeps full for positives
    rgb[..., 1] = 1.0 - pos - neg    # green fades for both signs
    rgb[..., 2] = 1.0 - pos          # blue keeps full for negatives
    return np.clip(rgb, 0.0, 1.0)


def render_heatmap(rmap: RelevanceMap, layer: str, out_path) -> str:
    """Write the layer's relevance as a diverging-color raster (PNG or PPM by
    extension) plus a raw-values text sidecar; returns the sidecar path."""
    if layer not in rmap.layers:
        raise ValueError(f"relevance map has no layer {layer!r}; have {list(rmap.layers)}")
    rel = rmap.layers[layer]
    rgb = relevance_to_rgb(rel)
    out_path = str(out_path)
    if out_path.endswith(".ppm"):
        write_ppm(out_path, rgb)
    else:
        if not out_path.endswith(".png"):
            out_path += ".png"
        write_png(out_path, rgb)
    flat2d = rel.sum(axis=0) if rel.ndim == 3 else np.atleast_2d(rel)
    sidecar = out_path + ".txt"
    with open(sidecar, "w") as f:
        for row in flat2d:
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")
    return sidecar


def read_sidecar(path) -> np.ndarray:
    with open(path) as f:
        rows = [[float(tok) for tok in line.split()] for line in f if line.strip()]
    return np.asarray(rows, dtype=np.float64)
