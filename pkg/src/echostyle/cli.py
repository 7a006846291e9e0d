"""Command-line surface.

Subcommands: gen-synthetic, ingest, denoise, augment, explain, train,
evaluate, benchmark-scaling, run. Image I/O is PGM/PNG; reports are
line-oriented text. `run` executes the full pipeline from a flat key-value
config file; any config key can be overridden with --key value.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import classify, data, distrib, engine, lrp, pipeline, srad
from .featnet import (
    DEFAULT_FEATURE_SEED,
    build_network,
    default_feature_network,
    load_weights,
    save_weights,
)
from .image import read_image, write_pgm
from .styleloss import LossWeights, ReferenceSet


def _cmd_gen_synthetic(args):
    ds = data.gen_synthetic(args.per_class, args.size, args.seed, args.out_dir)
    counts = ds.counts()
    print(f"wrote {counts['benign']} benign + {counts['malignant']} malignant "
          f"images under {args.out_dir}")


def _cmd_ingest(args):
    ds = data.ingest(args.root, skip_bad=args.skip_bad)
    counts = ds.counts()
    print(f"benign {counts['benign']}")
    print(f"malignant {counts['malignant']}")


def _parse_region(text):
    if text == "auto":
        return None
    return tuple(int(x) for x in text.split(","))


def _cmd_denoise(args):
    img = read_image(args.input)
    params = srad.SradParams(
        iterations_per_scale=args.iters, scales=args.scales, dt=args.dt,
        region=_parse_region(args.region))
    series = srad.srad_multiscale(img, params)
    for s, scale_img in enumerate(series, start=1):
        path = f"{args.out_prefix}-s{s}.pgm"
        write_pgm(path, scale_img)
        print(path)


def _loss_weights(args):
    return LossWeights(alpha=args.alpha, beta=args.beta,
                       style_balance=args.style_balance)


def _cmd_augment(args):
    contents = [read_image(p) for p in args.contents]
    refs = ReferenceSet([read_image(p) for p in args.refs],
                        histogram=None if args.identity_histogram else "auto")
    net = default_feature_network(args.net_seed)
    cfg = engine.NstConfig(
        iterations=args.iterations, step_size=args.step_size,
        weights=_loss_weights(args), init=args.init, noise_seed=args.seed,
        save_traces=not args.no_traces)
    names = [os.path.splitext(os.path.basename(p))[0] for p in args.contents]
    records = engine.augment_batch(contents, refs, net, cfg, args.out_dir,
                                   workers=args.workers, names=names)
    print(f"wrote {len(records)} stylized images under {args.out_dir} "
          f"(manifest.tsv lists sources, references and final losses)")


def _cmd_explain(args):
    img = read_image(args.image)
    net = default_feature_network(args.net_seed)
    if args.weights:
        load_weights(net, args.weights)
    cfg = lrp.LrpConfig(alpha=args.alpha, beta=args.beta, epsilon=args.epsilon)
    if args.target == "content":
        if not args.content:
            raise SystemExit("--target content requires --content REFERENCE_IMAGE")
        ref = read_image(args.content)
        layer = args.content_layer
        a = net.forward(img)[layer]
        b = net.forward(ref)[layer]
        rmap = lrp.propagate_from(net, img, layer, 0.5 * (a - b) ** 2, cfg)
    elif args.target == "sum":
        rmap = lrp.propagate(net, img, "sum", cfg)
    else:
        rmap = lrp.propagate(net, img, int(args.target), cfg)
    sidecar = lrp.render_heatmap(rmap, "input", args.out_prefix + ".png")
    audit = lrp.conservation_audit(rmap)
    print(f"explained value f(x) = {rmap.output_value:.6g}")
    print(f"heatmap {args.out_prefix}.png")
    print(f"sidecar {sidecar}")
    print(f"worst conservation gap {max(a[2] for a in audit):.3g}")


def _train_config(args):
    return classify.TrainConfig(
        epochs=args.epochs, patience=args.patience, lr=args.lr,
        momentum=args.momentum, plateau_factor=args.plateau_factor,
        plateau_patience=args.plateau_patience, lr_floor=args.lr_floor,
        batch_size=args.batch_size, dropout=args.dropout,
        batchnorm=not args.no_batchnorm)


def _cmd_train(args):
    ds = data.ingest(args.data)
    items = data.load_items(ds)
    train_items, val_items, test_items = classify.split_dataset(
        items, (args.split_train, args.split_val, args.split_test), args.seed)
    model, history = classify.train_head(
        None, train_items, val_items, _train_config(args), seed=args.seed)
    for h in history:
        print(f"epoch {h['epoch']} train_loss {h['train_loss']:.6f} "
              f"val_loss {h['val_loss']:.6f} val_acc {h['val_acc']:.4f} lr {h['lr']:.3g}")
    save_weights(model.backbone, args.out)
    np.savez(args.out + ".head.npz", **{
        k.replace("head.", ""): v for k, v in model.head_param_items()},
        running_mean=model.running_mean, running_var=model.running_var,
        batchnorm=np.array(int(model.cfg.batchnorm)))
    print(f"model written to {args.out} (+ {args.out}.head.npz)")


def _load_model(args):
    backbone = build_network(classify.classifier_backbone_spec(), DEFAULT_FEATURE_SEED)
    load_weights(backbone, args.model)
    head = np.load(args.model + ".head.npz")
    cfg = classify.TrainConfig(batchnorm=bool(int(head["batchnorm"])))
    model = classify.Classifier(backbone, cfg)
    model.dense_w[...] = head["dense_w"]
    model.dense_b[...] = head["dense_b"]
    if cfg.batchnorm:
        model.bn_gamma[...] = head["bn_gamma"]
        model.bn_beta[...] = head["bn_beta"]
    model.running_mean[...] = head["running_mean"]
    model.running_var[...] = head["running_var"]
    return model


def _cmd_evaluate(args):
    model = _load_model(args)
    ds = data.ingest(args.data)
    report = classify.evaluate(model, data.load_items(ds))
    print(classify.confusion_block(report), end="")
    for line in report.as_lines():
        print(line)


def _cmd_benchmark(args):
    counts = tuple(int(x) for x in args.workers.split(","))
    if args.workload == "augment":
        make_tasks = pipeline.make_augment_workload(
            args.images, args.size, args.steps, args.seed)
    else:
        items = data.synthetic_items(8, 16, args.seed)
        task = classify.ClassifierTask(items)

        def make_tasks():
            shards = distrib.make_shards(len(items), 4)

            def one(shard=shards[0]):
                params = task.init_params()
                vel = np.zeros_like(params)
                for step in range(args.steps):
                    _, g = task.grad(params, shard[:4], step)
                    params, vel = task.apply(params, vel, g)
                return params
            return [one] * 4
    report = distrib.speedup_benchmark(make_tasks, counts)
    print(distrib.format_benchmark_table(report))


def _cmd_run(args, overrides):
    kv = {}
    if args.config:
        with open(args.config) as f:
            kv.update(pipeline.parse_config_text(f.read()))
    kv.update(overrides)
    if args.out_root:
        kv["out.root"] = args.out_root
    cfg = pipeline.config_from_dict(kv)
    report = pipeline.run_pipeline(cfg)
    print(f"manifest {report.manifest_path}")
    if report.pre_metrics:
        print("pre-augmentation:  " + " ".join(report.pre_metrics.as_lines()[:2]))
    if report.post_metrics:
        print("post-augmentation: " + " ".join(report.post_metrics.as_lines()[:2]))
    if report.deltas:
        acc = report.deltas.get("accuracy")
        if acc is not None:
            print(f"accuracy delta {acc:+.4f}")


def _extract_overrides(argv):
    """Pull --key value pairs (keys containing a dot or known config words)
    out of argv so `run` accepts any config key as a flag."""
    rest, overrides = [], {}
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok.startswith("--") and ("." in tok or tok[2:] in ("seed", "workers")):
            if i + 1 >= len(argv):
                raise SystemExit(f"flag {tok} needs a value")
            overrides[tok[2:]] = argv[i + 1]
            i += 2
        else:
            rest.append(tok)
            i += 1
    return rest, overrides


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="echostyle",
        description="Explainable style-transfer augmentation for speckled "
                    "ultrasound images.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic two-class corpus")
    g.add_argument("out_dir")
    g.add_argument("--per-class", type=int, default=20)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=_cmd_gen_synthetic)

    g = sub.add_parser("ingest", help="load and validate a benign/malignant tree")
    g.add_argument("root")
    g.add_argument("--skip-bad", action="store_true")
    g.set_defaults(fn=_cmd_ingest)

    g = sub.add_parser("denoise", help="multiscale speckle-reducing diffusion")
    g.add_argument("--scales", type=int, default=8)
    g.add_argument("--iters", type=int, default=10)
    g.add_argument("--dt", type=float, default=0.05)
    g.add_argument("--region", default="auto", help="x,y,w,h homogeneous rectangle")
    g.add_argument("input")
    g.add_argument("out_prefix")
    g.set_defaults(fn=_cmd_denoise)

    g = sub.add_parser("augment", help="stylize content images against references")
    g.add_argument("out_dir")
    g.add_argument("contents", nargs="+")
    g.add_argument("--refs", nargs="+", required=True)
    g.add_argument("--iterations", type=int, default=200)
    g.add_argument("--step-size", type=float, default=0.5)
    g.add_argument("--alpha", type=float, default=1.0)
    g.add_argument("--beta", type=float, default=1.0)
    g.add_argument("--style-balance", type=float, default=1.0)
    g.add_argument("--init", choices=("content", "noise"), default="content")
    g.add_argument("--identity-histogram", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--net-seed", type=int, default=DEFAULT_FEATURE_SEED)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--no-traces", action="store_true")
    g.set_defaults(fn=_cmd_augment)

    g = sub.add_parser("explain", help="relevance heatmap for an image")
    g.add_argument("image")
    g.add_argument("out_prefix")
    g.add_argument("--target", default="sum",
                   help="'sum', an output index, or 'content'")
    g.add_argument("--content", help="content reference image for --target content")
    g.add_argument("--content-layer", default="res3")
    g.add_argument("--alpha", type=float, default=2.0)
    g.add_argument("--beta", type=float, default=1.0)
    g.add_argument("--epsilon", type=float, default=1e-9)
    g.add_argument("--net-seed", type=int, default=DEFAULT_FEATURE_SEED)
    g.add_argument("--weights", help="optional weight file for the network")
    g.set_defaults(fn=_cmd_explain)

    g = sub.add_parser("train", help="train the classifier on a dataset tree")
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True, help="weight file to write")
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--patience", type=int, default=7)
    g.add_argument("--lr", type=float, default=1e-4)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--plateau-factor", type=float, default=0.5)
    g.add_argument("--plateau-patience", type=int, default=3)
    g.add_argument("--lr-floor", type=float, default=1e-7)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--dropout", type=float, default=0.5)
    g.add_argument("--no-batchnorm", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split-train", type=float, default=0.7)
    g.add_argument("--split-val", type=float, default=0.15)
    g.add_argument("--split-test", type=float, default=0.15)
    g.set_defaults(fn=_cmd_train)

    g = sub.add_parser("evaluate", help="metric suite on a dataset tree")
    g.add_argument("--model", required=True)
    g.add_argument("--data", required=True)
    g.set_defaults(fn=_cmd_evaluate)

    g = sub.add_parser("benchmark-scaling", help="speedup table over worker counts")
    g.add_argument("--workers", default="1,2,4,8")
    g.add_argument("--steps", type=int, default=30)
    g.add_argument("--workload", choices=("augment", "train"), default="augment")
    g.add_argument("--images", type=int, default=4)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=_cmd_benchmark)

    g = sub.add_parser("run", help="full pipeline from a config file")
    g.add_argument("--config", help="flat key=value config file")
    g.add_argument("--out-root", help="output root (overrides out.root)")
    g.set_defaults(fn=None)

    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    overrides = {}
    if argv and argv[0] == "run":
        argv, overrides = _extract_overrides(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        _cmd_run(args, overrides)
    else:
        args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
