"""End-to-end orchestration: denoise -> augment -> explain -> train ->
evaluate -> benchmark, with a single flat-text run manifest recording every
parameter, seed, artifact path and metric.

The manifest is deterministic for a fixed config and seed; wall-clock values
are recorded under keys starting with "time." and are excluded from
determinism comparisons. Artifact paths are stored relative to the output
root, so identical runs in different directories produce identical
manifests. The dataset is split before augmentation and only training-split
images are ever stylized, so no derivative of a validation or test image can
leak into training.
"""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass, field

from . import classify, data, distrib, engine, lrp, srad
from .featnet import DEFAULT_FEATURE_SEED, default_feature_network
from .image import write_pgm
from .styleloss import LossWeights, ReferenceSet

__all__ = [
    "PipelineConfig",
    "RunReport",
    "run_pipeline",
    "parse_config_text",
    "config_from_dict",
    "manifest_checksum",
    "make_augment_workload",
]


@dataclass
class PipelineConfig:
    # stage toggles
    denoise: bool = True
    augment: bool = True
    explain: bool = True
    train: bool = True
    evaluate: bool = True
    benchmark: bool = False
    # data source: a benign/malignant directory, or the synthetic corpus
    data_root: str = ""
    per_class: int = 20
    image_size: int = 16
    # global
    seed: int = 0
    out_root: str = "run-out"
    workers: int = 1
    net_seed: int = DEFAULT_FEATURE_SEED
    split: tuple = (0.7, 0.15, 0.15)
    # stage parameter blocks
    srad_params: srad.SradParams = field(default_factory=srad.SradParams)
    nst_iterations: int = 120
    nst_step_size: float = 0.5
    nst_init: str = "content"
    nst_refs: int = 2
    loss_alpha: float = 1.0
    loss_beta: float = 1.0
    style_balance: float = 1.0
    lrp_cfg: lrp.LrpConfig = field(default_factory=lrp.LrpConfig)
    train_cfg: classify.TrainConfig = field(default_factory=classify.TrainConfig)
    bench_workers: tuple = (1, 2, 4)
    bench_images: int = 4
    bench_iterations: int = 30
    bench_size: int = 32

    def __post_init__(self):
        if self.evaluate and not self.train:
            raise ValueError("the evaluate stage requires the train stage")
        if self.nst_refs < 1:
            raise ValueError("nst_refs must be >= 1")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {self.split}")


class StageError(RuntimeError):
    """A pipeline stage failed; partial artifacts under the output root are
    retained for inspection."""

    def __init__(self, stage, cause):
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class RunReport:
    out_root: str
    manifest_path: str
    lines: list
    pre_metrics: classify.MetricsReport | None = None
    post_metrics: classify.MetricsReport | None = None
    deltas: dict | None = None
    benchmark: distrib.BenchmarkReport | None = None

    def value(self, key: str) -> str:
        prefix = key + " = "
        for line in self.lines:
            if line.startswith(prefix):
                return line[len(prefix):]
        raise KeyError(key)


def manifest_checksum(lines, exclude_prefixes=("time.",)) -> str:
    kept = [l for l in lines if not any(l.startswith(p) for p in exclude_prefixes)]
    return hashlib.sha256("\n".join(kept).encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


class _Manifest:
    def __init__(self, out_root):
        self.out_root = str(out_root)
        self.lines = []

    def put(self, key, value):
        self.lines.append(f"{key} = {_fmt(value)}")

    def artifact(self, key, path):
        rel = os.path.relpath(str(path), self.out_root)
        self.lines.append(f"artifact.{key} = {rel}")
        return path

    def write(self, name="manifest.txt"):
        path = os.path.join(self.out_root, name)
        with open(path, "w") as f:
            f.write("\n".join(self.lines) + "\n")
        return path


def _eval_items(items, final_scales, use_denoised):
    if not use_denoised:
        return items
    return [(final_scales[id(img)], label) for img, label in items]


def run_pipeline(cfg: PipelineConfig) -> RunReport:
    """Execute the enabled stages in order. A stage failure raises StageError
    naming the stage; artifacts written so far stay under the output root."""
    stage = ["setup"]
    try:
        return _run_pipeline(cfg, stage)
    except Exception as e:
        raise StageError(stage[0], e) from e


def _run_pipeline(cfg: PipelineConfig, stage) -> RunReport:
    t_run = time.perf_counter()
    out = str(cfg.out_root)
    os.makedirs(out, exist_ok=True)
    man = _Manifest(out)

    # record the full configuration first
    man.put("config.seed", cfg.seed)
    man.put("config.workers", cfg.workers)
    man.put("config.net_seed", cfg.net_seed)
    man.put("config.split", cfg.split)
    for name in ("denoise", "augment", "explain", "train", "evaluate", "benchmark"):
        man.put(f"config.stage.{name}", getattr(cfg, name))
    man.put("config.data_root", cfg.data_root or "(synthetic)")
    man.put("config.per_class", cfg.per_class)
    man.put("config.image_size", cfg.image_size)
    man.put("config.srad.scales", cfg.srad_params.scales)
    man.put("config.srad.iterations_per_scale", cfg.srad_params.iterations_per_scale)
    man.put("config.srad.dt", cfg.srad_params.dt)
    man.put("config.nst.iterations", cfg.nst_iterations)
    man.put("config.nst.step_size", cfg.nst_step_size)
    man.put("config.nst.init", cfg.nst_init)
    man.put("config.nst.refs", cfg.nst_refs)
    man.put("config.loss.alpha", cfg.loss_alpha)
    man.put("config.loss.beta", cfg.loss_beta)
    man.put("config.loss.style_balance", cfg.style_balance)
    man.put("config.lrp.alpha", cfg.lrp_cfg.alpha)
    man.put("config.lrp.beta", cfg.lrp_cfg.beta)
    man.put("config.lrp.epsilon", cfg.lrp_cfg.epsilon)
    for k in ("epochs", "patience", "lr", "momentum", "batch_size", "dropout",
              "plateau_factor", "plateau_patience", "lr_floor", "batchnorm"):
        man.put(f"config.train.{k}", getattr(cfg.train_cfg, k))

    # ---------------------------------------------------------------- data
    stage[0] = "data"
    if cfg.data_root:
        dataset = data.ingest(cfg.data_root)
        items = data.load_items(dataset)
    else:
        dataset = data.gen_synthetic(cfg.per_class, cfg.image_size, cfg.seed,
                                     os.path.join(out, "data"))
        items = data.load_items(dataset)
    counts = dataset.counts()
    man.put("data.count.benign", counts["benign"])
    man.put("data.count.malignant", counts["malignant"])

    train_items, val_items, test_items = classify.split_dataset(
        items, cfg.split, cfg.seed)
    man.put("split.train", len(train_items))
    man.put("split.val", len(val_items))
    man.put("split.test", len(test_items))

    # ------------------------------------------------------------- denoise
    stage[0] = "denoise"
    final_scale = {}
    if cfg.denoise:
        t0 = time.perf_counter()
        den_dir = os.path.join(out, "denoised")
        os.makedirs(den_dir, exist_ok=True)
        for i, (img, label) in enumerate(items):
            series = srad.srad_multiscale(img, cfg.srad_params)
            final_scale[id(img)] = series[-1]
            if i == 0:
                for s, scale_img in enumerate(series, start=1):
                    p = os.path.join(den_dir, f"sample_scale{s}.pgm")
                    write_pgm(p, scale_img)
                    man.artifact(f"denoise.sample_scale{s}", p)
        man.put("denoise.images", len(items))
        man.put("denoise.classifier_scale", cfg.srad_params.scales)
        man.put("time.denoise.seconds", time.perf_counter() - t0)

    nst_net = default_feature_network(cfg.net_seed)
    weights = LossWeights(
        alpha=cfg.loss_alpha, beta=cfg.loss_beta, style_balance=cfg.style_balance)
    nst_cfg = engine.NstConfig(
        iterations=cfg.nst_iterations, step_size=cfg.nst_step_size,
        weights=weights, init=cfg.nst_init, noise_seed=cfg.seed)

    # ------------------------------------------------------------- augment
    stage[0] = "augment"
    augmented = []
    if cfg.augment:
        t0 = time.perf_counter()
        total = 0
        expected = 0
        for label in data.LABELS:
            contents = [img for img, lab in train_items if lab == label]
            if not contents:
                continue
            n_refs = min(cfg.nst_refs, len(contents))
            expected += len(contents) * len(engine.default_combinations(n_refs))
            refs = ReferenceSet(contents[:n_refs])
            out_dir = os.path.join(out, "augmented", label)
            records = engine.augment_batch(
                contents, refs, nst_net, nst_cfg, out_dir,
                workers=cfg.workers,
                names=[f"{label}{i:04d}" for i in range(len(contents))])
            for r in records:
                aug_img = r["image"]
                if cfg.denoise:
                    aug_img = srad.srad_multiscale(aug_img, cfg.srad_params)[-1]
                augmented.append((aug_img, label))
                man.artifact(f"augment.{label}.{r['output']}",
                             os.path.join(out_dir, r["output"]))
            man.artifact(f"augment.{label}.manifest",
                         os.path.join(out_dir, "manifest.tsv"))
            total += len(records)
        man.put("augment.outputs", total)
        man.put("augment.expected_outputs", expected)
        man.put("time.augment.seconds", time.perf_counter() - t0)

    # ------------------------------------------------------------- explain
    stage[0] = "explain"
    if cfg.explain:
        t0 = time.perf_counter()
        content_img = train_items[0][0]
        stylized = augmented[0][0] if augmented else content_img
        c_stack = nst_net.forward(content_img)
        s_stack = nst_net.forward(stylized)
        layer = weights.content_layer
        seed_rel = 0.5 * (s_stack[layer] - c_stack[layer]) ** 2
        rmap = lrp.propagate_from(nst_net, content_img, layer, seed_rel, cfg.lrp_cfg)
        heat = os.path.join(out, "explain", "content_relevance.png")
        os.makedirs(os.path.dirname(heat), exist_ok=True)
        sidecar = lrp.render_heatmap(rmap, "input", heat)
        man.artifact("explain.heatmap", heat)
        man.artifact("explain.sidecar", sidecar)
        audit = lrp.conservation_audit(rmap)
        audit_path = os.path.join(out, "explain", "conservation.txt")
        with open(audit_path, "w") as f:
            f.write("# layer relevance_sum rel_gap\n")
            for name, total, gap in audit:
                f.write(f"{name} {total:.12g} {gap:.3g}\n")
        man.artifact("explain.audit", audit_path)
        man.put("explain.output_value", rmap.output_value)
        man.put("explain.worst_gap", max(a[2] for a in audit))
        man.put("time.explain.seconds", time.perf_counter() - t0)

    # ------------------------------------------------------ train/evaluate
    stage[0] = "train"
    pre_report = post_report = None
    deltas = None
    if cfg.train:
        t0 = time.perf_counter()
        use_den = cfg.denoise
        tr = _eval_items(train_items, final_scale, use_den)
        va = _eval_items(val_items, final_scale, use_den)
        te = _eval_items(test_items, final_scale, use_den)
        pre_model, pre_hist = classify.train_head(
            None, tr, va, cfg.train_cfg, seed=cfg.seed)
        man.put("train.pre.epochs_run", len(pre_hist))
        man.put("train.pre.final_train_loss", pre_hist[-1]["train_loss"])
        man.put("train.pre.final_val_loss", pre_hist[-1]["val_loss"])
        _write_history(man, out, "pre", pre_hist)
        if cfg.augment:
            post_model, post_hist = classify.train_head(
                None, tr + augmented, va, cfg.train_cfg, seed=cfg.seed)
            man.put("train.post.epochs_run", len(post_hist))
            man.put("train.post.final_train_loss", post_hist[-1]["train_loss"])
            man.put("train.post.final_val_loss", post_hist[-1]["val_loss"])
            man.put("train.post.samples", len(tr) + len(augmented))
            _write_history(man, out, "post", post_hist)
        else:
            post_model = None
        man.put("time.train.seconds", time.perf_counter() - t0)

        stage[0] = "evaluate"
        if cfg.evaluate:
            t0 = time.perf_counter()
            pre_report = classify.evaluate(pre_model, te)
            _put_metrics(man, "metrics.pre", pre_report)
            if post_model is not None:
                post_report = classify.evaluate(post_model, te)
                _put_metrics(man, "metrics.post", post_report)
                deltas = classify.compare_pre_post(pre_report, post_report)
                for k, v in deltas.items():
                    man.put(f"metrics.delta.{k}", "undefined" if v is None else v)
            eval_path = os.path.join(out, "evaluation.txt")
            with open(eval_path, "w") as f:
                f.write("pre-augmentation\n")
                f.write(classify.confusion_block(pre_report))
                f.write("\n".join(pre_report.as_lines()) + "\n")
                if post_report:
                    f.write("\npost-augmentation\n")
                    f.write(classify.confusion_block(post_report))
                    f.write("\n".join(post_report.as_lines()) + "\n")
            man.artifact("evaluation.report", eval_path)
            man.put("time.evaluate.seconds", time.perf_counter() - t0)

    # ----------------------------------------------------------- benchmark
    stage[0] = "benchmark"
    bench_report = None
    if cfg.benchmark:
        t0 = time.perf_counter()
        workload = make_augment_workload(
            cfg.bench_images, cfg.bench_size, cfg.bench_iterations, cfg.seed)
        bench_report = distrib.speedup_benchmark(workload, cfg.bench_workers)
        table = distrib.format_benchmark_table(bench_report)
        bench_path = os.path.join(out, "benchmark.txt")
        with open(bench_path, "w") as f:
            f.write(table + "\n")
        man.artifact("benchmark.table", bench_path)
        man.put("benchmark.hardware_threads", bench_report.hardware_threads)
        for w, seconds, speedup in bench_report.rows:
            man.put(f"time.benchmark.w{w}.seconds", seconds)
            man.put(f"time.benchmark.w{w}.speedup", speedup)
        man.put("time.benchmark.seconds", time.perf_counter() - t0)

    man.put("time.total.seconds", time.perf_counter() - t_run)
    path = man.write()
    return RunReport(
        out_root=out, manifest_path=path, lines=man.lines,
        pre_metrics=pre_report, post_metrics=post_report, deltas=deltas,
        benchmark=bench_report,
    )


def _write_history(man, out, tag, hist):
    path = os.path.join(out, f"history_{tag}.txt")
    with open(path, "w") as f:
        f.write("# epoch train_loss train_acc val_loss val_acc lr\n")
        for h in hist:
            f.write(f"{h['epoch']} {h['train_loss']:.12g} {h['train_acc']:.12g} "
                    f"{h['val_loss']:.12g} {h['val_acc']:.12g} {h['lr']:.12g}\n")
    man.artifact(f"train.history.{tag}", path)


def _put_metrics(man, prefix, report):
    man.put(f"{prefix}.confusion", (report.tp, report.fp, report.tn, report.fn))
    for name in ("accuracy", "recall", "specificity", "precision", "f1"):
        v = getattr(report, name)
        man.put(f"{prefix}.{name}", "undefined" if v is None else v)


def make_augment_workload(n_images: int, size: int, iterations: int, seed: int):
    """Benchmark workload factory: independent stylization tasks over a small
    synthetic corpus. Returns a callable producing fresh task closures."""
    items = data.synthetic_items(max(2, n_images // 2), size, seed)[:n_images]
    net = default_feature_network()
    cfg = engine.NstConfig(iterations=iterations, save_traces=False)

    def make_tasks():
        tasks = []
        for i, (img, _) in enumerate(items):
            refs = ReferenceSet([items[(i + 1) % len(items)][0]])
            tasks.append(lambda img=img, refs=refs: engine.stylize(img, refs, net, cfg))
        return tasks

    return make_tasks


# ------------------------------------------------------------ config file

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config_text(text: str) -> dict:
    """Flat key-value config: one `key = value` per line, # comments."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _as_bool(v: str) -> bool:
    try:
        return _BOOL[v.lower()]
    except KeyError:
        raise ValueError(f"expected a boolean, got {v!r}") from None


def config_from_dict(kv: dict) -> PipelineConfig:
    """Build a PipelineConfig from flat stage-prefixed keys (the config-file
    and CLI-override vocabulary)."""
    kv = dict(kv)
    cfg = {}
    srad_kw, train_kw, lrp_kw = {}, {}, {}

    def take(key, conv, dest, name):
        if key in kv:
            dest[name] = conv(kv.pop(key))

    for stage in ("denoise", "augment", "explain", "train", "evaluate", "benchmark"):
        take(f"stages.{stage}", _as_bool, cfg, stage)
    take("data.root", str, cfg, "data_root")
    take("data.per_class", int, cfg, "per_class")
    take("data.size", int, cfg, "image_size")
    take("seed", int, cfg, "seed")
    take("out.root", str, cfg, "out_root")
    take("workers", int, cfg, "workers")
    take("net.seed", int, cfg, "net_seed")
    if "split.ratios" in kv:
        cfg["split"] = tuple(float(x) for x in kv.pop("split.ratios").split(","))
    take("srad.scales", int, srad_kw, "scales")
    take("srad.iterations", int, srad_kw, "iterations_per_scale")
    take("srad.dt", float, srad_kw, "dt")
    if "srad.region" in kv:
        v = kv.pop("srad.region")
        srad_kw["region"] = None if v == "auto" else tuple(int(x) for x in v.split(","))
    take("nst.iterations", int, cfg, "nst_iterations")
    take("nst.step_size", float, cfg, "nst_step_size")
    take("nst.init", str, cfg, "nst_init")
    take("nst.refs", int, cfg, "nst_refs")
    take("loss.alpha", float, cfg, "loss_alpha")
    take("loss.beta", float, cfg, "loss_beta")
    take("loss.style_balance", float, cfg, "style_balance")
    take("lrp.alpha", float, lrp_kw, "alpha")
    take("lrp.beta", float, lrp_kw, "beta")
    take("lrp.epsilon", float, lrp_kw, "epsilon")
    for k, conv in (("epochs", int), ("patience", int), ("lr", float),
                    ("momentum", float), ("plateau_factor", float),
                    ("plateau_patience", int), ("lr_floor", float),
                    ("batch_size", int), ("dropout", float), ("batchnorm", _as_bool)):
        take(f"train.{k}", conv, train_kw, k)
    if "bench.workers" in kv:
        cfg["bench_workers"] = tuple(int(x) for x in kv.pop("bench.workers").split(","))
    take("bench.images", int, cfg, "bench_images")
    take("bench.iterations", int, cfg, "bench_iterations")
    take("bench.size", int, cfg, "bench_size")
    if kv:
        raise ValueError(f"unknown config key(s): {sorted(kv)}")
    if srad_kw:
        cfg["srad_params"] = srad.SradParams(**srad_kw)
    if train_kw:
        cfg["train_cfg"] = classify.TrainConfig(**train_kw)
    if lrp_kw:
        cfg["lrp_cfg"] = lrp.LrpConfig(**lrp_kw)
    return PipelineConfig(**cfg)
