"""Iterative stylization and batch augmentation.

stylize() minimizes the total objective (content term plus the combined
multi-reference style term) over the output image's pixels by gradient
descent with backtracking: a step that would increase the loss is retried at
half the step size, so the recorded loss never increases. Pixels are clamped
to [0, 1] after every accepted step.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .featnet import Network
from .image import check_image, write_pgm
from .styleloss import (
    LossWeights,
    ReferenceSet,
    content_loss,
    content_loss_grad,
    multi_ref_style_loss,
    multi_ref_targets,
    proposed_style_grads,
    total_loss,
)

__all__ = [
    "NstConfig",
    "StylizeError",
    "StylizeResult",
    "stylize",
    "default_combinations",
    "augment_batch",
    "write_manifest",
    "write_loss_trace",
]


class StylizeError(RuntimeError):
    """Raised on divergence or step-size underflow; carries the loss trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class NstConfig:
    iterations: int = 1000
    step_size: float = 0.5
    step_grow: float = 1.2
    step_shrink: float = 0.5
    min_step: float = 1e-14
    weights: LossWeights = field(default_factory=LossWeights)
    init: str = "content"        # content | noise
    noise_seed: int = 0
    save_traces: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.step_size <= 0:
            raise ValueError(f"step size must be > 0, got {self.step_size}")
        if self.init not in ("content", "noise"):
            raise ValueError(f"init must be 'content' or 'noise', got {self.init!r}")


@dataclass
class StylizeResult:
    image: np.ndarray
    trace: list            # (iteration, content, style, total); entry 0 is initial
    final_content: float
    final_style: float
    final_total: float


def _evaluate(x, net, content_stack, targets, weights):
    stack, caches = net.forward_cache(x)
    c_term = content_loss(stack, content_stack, weights.content_layer)
    s_term = weights.style_balance * multi_ref_style_loss(
        stack, None, net, weights, targets)
    return stack, caches, c_term, s_term, total_loss(c_term, s_term, weights)


def stylize(content: np.ndarray, refs: ReferenceSet, net: Network,
            cfg: NstConfig = NstConfig()) -> StylizeResult:
    """Produce a stylized copy of `content` toward the reference set's style
    targets. Returns the image, the per-iteration loss trace, and the final
    loss terms."""
    content = check_image(content, "content image")
    for i, ref in enumerate(refs.images):
        check_image(ref, f"style reference {i}")
    weights = cfg.weights
    style_layers = [l for l, w in weights.layer_weights.items() if w > 0]
    targets = multi_ref_targets(refs, net, style_layers)
    content_stack = net.forward(content)

    if cfg.init == "content":
        x = content.copy()
    else:
        rng = np.random.default_rng(cfg.noise_seed)
        x = rng.uniform(0.0, 1.0, size=content.shape)

    stack, caches, c_term, s_term, cur = _evaluate(x, net, content_stack, targets, weights)
    trace = [(0, c_term, s_term, cur)]
    eta = cfg.step_size

    for it in range(1, cfg.iterations + 1):
        if not np.isfinite(cur):
            raise StylizeError(f"loss diverged (non-finite) at iteration {it}", trace)
        seeds = proposed_style_grads(stack, weights, targets)
        for layer in seeds:
            seeds[layer] = weights.beta * seeds[layer]
        cgrad = weights.alpha * content_loss_grad(stack, content_stack, weights.content_layer)
        seeds[weights.content_layer] = seeds.get(weights.content_layer, 0) + cgrad
        g, _ = net.backward(caches, seeds)
        g = g[0] if g.ndim == 3 else g

        while True:
            cand = np.clip(x - eta * g, 0.0, 1.0)
            nstack, ncaches, nc, ns, nloss = _evaluate(
                cand, net, content_stack, targets, weights)
            if np.isfinite(nloss) and nloss <= cur:
                x, stack, caches = cand, nstack, ncaches
                c_term, s_term, cur = nc, ns, nloss
                eta *= cfg.step_grow
                break
            eta *= cfg.step_shrink
            if eta < cfg.min_step:
                raise StylizeError(
                    f"step size underflow ({eta:.3g}) at iteration {it}", trace)
        trace.append((it, c_term, s_term, cur))

    return StylizeResult(x, trace, c_term, s_term, cur)


def default_combinations(n_refs: int) -> list:
    """Default style-combination policy: every single reference, plus the
    full reference set when there is more than one."""
    combos = [[i] for i in range(n_refs)]
    if n_refs > 1:
        combos.append(list(range(n_refs)))
    return combos


def write_loss_trace(path, trace) -> None:
    with open(path, "w") as f:
        f.write("# iteration content style total\n")
        for it, c, s, t in trace:
            f.write(f"{it} {c:.17g} {s:.17g} {t:.17g}\n")


def write_manifest(path, records) -> None:
    """One line per output: source, reference ids, final loss, output path."""
    with open(path, "w") as f:
        f.write("# source\trefs\tfinal_loss\toutput\n")
        for r in records:
            refs = ",".join(str(i) for i in r["refs"])
            f.write(f"{r['source']}\t{refs}\t{r['final_loss']:.17g}\t{r['output']}\n")


def augment_batch(contents, refs: ReferenceSet, net: Network, cfg: NstConfig,
                  out_dir, combinations=None, workers: int = 1, names=None) -> list:
    """Stylize every content image against every configured reference
    combination, writing one PGM per output plus a manifest. Returns the
    manifest records. The output directory must be writable before any
    compute starts."""
    contents = list(contents)
    if not contents:
        raise ValueError("augment_batch: empty content list")
    os.makedirs(out_dir, exist_ok=True)
    probe = os.path.join(out_dir, ".write-probe")
    try:
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as e:
        raise OSError(f"output directory {out_dir!r} is not writable: {e}") from e

    if combinations is None:
        combinations = default_combinations(refs.n)
    if names is None:
        names = [f"content{i:04d}" for i in range(len(contents))]

    tasks = []
    for ci, img in enumerate(contents):
        for si, combo in enumerate(combinations):
            tasks.append((ci, si, img, combo))

    def run(task):
        ci, si, img, combo = task
        sub = ReferenceSet([refs.images[i] for i in combo],
                           histogram=refs.histogram, bins=refs.bins)
        res = stylize(img, sub, net, cfg)
        out_name = f"{names[ci]}_style{si}.pgm"
        out_path = os.path.join(out_dir, out_name)
        write_pgm(out_path, res.image)
        if cfg.save_traces:
            write_loss_trace(out_path + ".trace.txt", res.trace)
        return {
            "source": names[ci],
            "refs": combo,
            "final_loss": res.final_total,
            "output": out_name,
            "image": res.image,
        }

    if workers <= 1:
        records = [run(t) for t in tasks]
    else:
        from .distrib import parallel_map
        records = parallel_map(run, tasks, workers)

    write_manifest(os.path.join(out_dir, "manifest.tsv"), records)
    return records
