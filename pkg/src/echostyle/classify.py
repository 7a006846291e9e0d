"""Binary classifier over the feature backbone, and the evaluation harness.

The model is the backbone (all layers trainable, i.e. fully fine-tuned)
followed by a head of global average pooling, feature-wise batch
normalization, dropout, a 2-unit dense layer and softmax, trained with
momentum SGD under categorical cross-entropy on one-hot labels. Training
uses early stopping on validation loss and a reduce-on-plateau learning-rate
rule. Batch normalization uses per-batch statistics during training and
frozen running averages at evaluation.

Malignant is the positive class for recall/precision/specificity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .featnet import (
    DEFAULT_FEATURE_SEED,
    Network,
    build_network,
    default_feature_spec,
)
from .tensor import global_avg_pool, global_avg_pool_backward

CLASSES = ("benign", "malignant")  # index 1 (malignant) is the positive class
_BN_EPS = 1e-5

__all__ = [
    "CLASSES",
    "TrainConfig",
    "MetricsReport",
    "Classifier",
    "classifier_backbone_spec",
    "split_dataset",
    "train_head",
    "evaluate",
    "confusion_block",
    "compare_pre_post",
    "ClassifierTask",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    patience: int = 7
    lr: float = 1e-4
    momentum: float = 0.9
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    lr_floor: float = 1e-7
    batch_size: int = 32
    dropout: float = 0.5
    batchnorm: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0 < self.dropout < 1:
            raise ValueError(f"dropout must be in (0, 1), got {self.dropout}")
        if self.patience > self.epochs:
            raise ValueError(
                f"patience {self.patience} exceeds epoch budget {self.epochs}"
            )
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def classifier_backbone_spec() -> list:
    """The feature architecture with leaky-relu activations (negative inputs
    pass scaled instead of clipping), as used by the classifier."""
    out = []
    for s in default_feature_spec():
        if s.kind == "activation":
            out.append(replace(s, activation="leaky-relu", slope=0.01))
        elif s.kind == "residual":
            body = tuple(
                replace(b, activation="leaky-relu", slope=0.01)
                if b.kind == "activation" else b
                for b in s.body
            )
            out.append(replace(s, body=body))
        else:
            out.append(s)
    return out


class Classifier:
    """Backbone + head with explicit parameters; all arrays are float64 and
    the whole parameter set round-trips through one flat vector."""

    def __init__(self, backbone: Network, cfg: TrainConfig, head_seed: int = 0):
        self.backbone = backbone
        self.cfg = cfg
        self.top_layer = backbone.layer_names[-1]
        feat = self._feature_dim()
        rng = np.random.default_rng(head_seed)
        self.dense_w = rng.normal(0.0, np.sqrt(2.0 / feat), size=(2, feat))
        self.dense_b = np.zeros(2)
        if cfg.batchnorm:
            self.bn_gamma = np.ones(feat)
            self.bn_beta = np.zeros(feat)
        self.running_mean = np.zeros(feat)
        self.running_var = np.ones(feat)

    def _feature_dim(self) -> int:
        for s in reversed(self.backbone.specs):
            if s.kind == "conv":
                return s.out_channels
            if s.kind == "residual":
                for b in reversed(s.body):
                    if b.kind == "conv":
                        return b.out_channels
        raise ValueError("backbone has no conv layers")

    # -- parameters ---------------------------------------------------------

    def head_param_items(self):
        items = []
        if self.cfg.batchnorm:
            items += [("head.bn_gamma", self.bn_gamma), ("head.bn_beta", self.bn_beta)]
        items += [("head.dense_w", self.dense_w), ("head.dense_b", self.dense_b)]
        return items

    def param_items(self):
        return self.backbone.param_items() + self.head_param_items()

    def flat_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.param_items()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        pos = 0
        for _, a in self.param_items():
            n = a.size
            a[...] = np.asarray(flat[pos:pos + n]).reshape(a.shape)
            pos += n
        if pos != flat.size:
            raise ValueError(f"parameter vector length {flat.size} != expected {pos}")

    def clone(self) -> "Classifier":
        c = Classifier.__new__(Classifier)
        c.backbone = self.backbone.clone()
        c.cfg = self.cfg
        c.top_layer = self.top_layer
        c.dense_w = self.dense_w.copy()
        c.dense_b = self.dense_b.copy()
        if self.cfg.batchnorm:
            c.bn_gamma = self.bn_gamma.copy()
            c.bn_beta = self.bn_beta.copy()
        c.running_mean = self.running_mean.copy()
        c.running_var = self.running_var.copy()
        return c

    # -- forward / backward --------------------------------------------------

    def _pool_batch(self, images, need_caches: bool):
        feats, caches = [], []
        for img in images:
            stack, cache = self.backbone.forward_cache(img)
            feats.append(global_avg_pool(stack[self.top_layer]))
            if need_caches:
                caches.append((cache, stack[self.top_layer].shape))
        return np.asarray(feats), caches

    @staticmethod
    def _softmax_rows(z):
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict_proba(self, images) -> np.ndarray:
        """Evaluation-mode forward: frozen BN running averages, no dropout."""
        z, _ = self._pool_batch(images, need_caches=False)
        if self.cfg.batchnorm:
            zhat = (z - self.running_mean) / np.sqrt(self.running_var + _BN_EPS)
            z = self.bn_gamma * zhat + self.bn_beta
        logits = z @ self.dense_w.T + self.dense_b
        return self._softmax_rows(logits)

    def predict(self, images) -> np.ndarray:
        return self.predict_proba(images).argmax(axis=1)

    def batch_step(self, images, labels, dropout_masks, update_running: bool = True):
        """Training-mode forward and backward on one batch. `dropout_masks`
        is the (B, F) inverted-dropout mask (0 or 1/keep). Returns
        (mean loss, accuracy, flat gradient over all parameters)."""
        labels = np.asarray(labels, dtype=int)
        b = len(images)
        z, caches = self._pool_batch(images, need_caches=True)

        if self.cfg.batchnorm:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            ivar = 1.0 / np.sqrt(var + _BN_EPS)
            zhat = (z - mu) * ivar
            bn_out = self.bn_gamma * zhat + self.bn_beta
            if update_running:
                self.running_mean = 0.9 * self.running_mean + 0.1 * mu
                self.running_var = 0.9 * self.running_var + 0.1 * var
        else:
            bn_out = z

        dropped = bn_out * dropout_masks
        logits = dropped @ self.dense_w.T + self.dense_b
        probs = self._softmax_rows(logits)
        eps = 1e-300
        loss = -float(np.mean(np.log(probs[np.arange(b), labels] + eps)))
        acc = float(np.mean(probs.argmax(axis=1) == labels))

        onehot = np.zeros_like(probs)
        onehot[np.arange(b), labels] = 1.0
        dlogits = (probs - onehot) / b
        g_dense_w = dlogits.T @ dropped
        g_dense_b = dlogits.sum(axis=0)
        d_dropped = dlogits @ self.dense_w
        d_bn_out = d_dropped * dropout_masks

        head_grads = {}
        if self.cfg.batchnorm:
            head_grads["head.bn_gamma"] = (d_bn_out * zhat).sum(axis=0)
            head_grads["head.bn_beta"] = d_bn_out.sum(axis=0)
            dzhat = d_bn_out * self.bn_gamma
            dvar = np.sum(dzhat * (z - mu) * -0.5 * ivar ** 3, axis=0)
            dmu = np.sum(-dzhat * ivar, axis=0) + dvar * np.mean(-2.0 * (z - mu), axis=0)
            dz = dzhat * ivar + dvar * 2.0 * (z - mu) / b + dmu / b
        else:
            dz = d_bn_out
        head_grads["head.dense_w"] = g_dense_w
        head_grads["head.dense_b"] = g_dense_b

        backbone_grads = {}
        for i, img in enumerate(images):
            cache, top_shape = caches[i]
            g_top = global_avg_pool_backward(top_shape, dz[i])
            _, grads_i = self.backbone.backward(cache, {self.top_layer: g_top})
            for k, v in grads_i.items():
                backbone_grads[k] = backbone_grads.get(k, 0) + v

        flat = np.concatenate(
            [np.asarray(backbone_grads.get(k, np.zeros_like(a))).ravel()
             for k, a in self.backbone.param_items()]
            + [np.asarray(head_grads[k]).ravel() for k, _ in self.head_param_items()]
        )
        return loss, acc, flat


def make_dropout_masks(rng: np.random.Generator, b: int, feat: int, p: float) -> np.ndarray:
    keep = 1.0 - p
    return (rng.uniform(size=(b, feat)) < keep) / keep


# ---------------------------------------------------------------- protocol


def _label_of(item):
    label = item.label if hasattr(item, "label") else item[1]
    return label


def split_dataset(items, ratios, seed: int):
    """Deterministic stratified split. Per class, items are shuffled with the
    seed and allocated by largest remainder, so per-class proportions in each
    split are within one item of the requested ratios; partitions are
    disjoint and covering."""
    ratios = [float(r) for r in ratios]
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios sum to {sum(ratios)}, expected 1")
    rng = np.random.default_rng(seed)
    by_class: dict = {}
    for it in items:
        by_class.setdefault(_label_of(it), []).append(it)
    n_parts = sum(1 for r in ratios if r > 0)
    splits = [[] for _ in ratios]
    for label in sorted(by_class, key=str):
        group = by_class[label]
        if len(group) < n_parts:
            raise ValueError(
                f"class {label!r} has {len(group)} item(s), fewer than the "
                f"{n_parts} nonempty partitions"
            )
        order = rng.permutation(len(group))
        group = [group[i] for i in order]
        exact = [len(group) * r for r in ratios]
        counts = [math.floor(e) for e in exact]
        rem = len(group) - sum(counts)
        fracs = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
        for i in fracs[:rem]:
            counts[i] += 1
        pos = 0
        for i, c in enumerate(counts):
            splits[i].extend(group[pos:pos + c])
            pos += c
    return tuple(splits)


class TrainDiverged(RuntimeError):
    pass


def train_head(backbone: Network | None, train_items, val_items,
               cfg: TrainConfig = TrainConfig(), seed: int = 0):
    """Train the classifier (backbone and head jointly) under the standard
    protocol: momentum SGD, early stopping on validation loss after
    `patience` non-improving epochs, learning rate halved (by plateau_factor)
    after plateau_patience non-improving epochs, floored at lr_floor.

    Returns (model, history); history has one record per trained epoch.
    Fixed seed gives the identical history."""
    if not train_items:
        raise ValueError("empty training set")
    if backbone is None:
        backbone = build_network(classifier_backbone_spec(), DEFAULT_FEATURE_SEED)
    model = Classifier(backbone.clone(), cfg, head_seed=seed)
    if val_items is None:
        val_items = train_items
    rng = np.random.default_rng(seed)
    feat = model.dense_w.shape[1]
    velocity = np.zeros_like(model.flat_params())
    lr = cfg.lr
    best_val = float("inf")
    stale = 0
    plateau_stale = 0
    history = []

    train_imgs = [it[0] for it in train_items]
    train_labels = [_class_index(_label_of(it)) for it in train_items]
    val_imgs = [it[0] for it in val_items]
    val_labels = np.asarray([_class_index(_label_of(it)) for it in val_items])

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_imgs))
        ep_loss, ep_acc, seen = 0.0, 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            imgs = [train_imgs[i] for i in idx]
            labels = [train_labels[i] for i in idx]
            masks = make_dropout_masks(rng, len(idx), feat, cfg.dropout)
            loss, acc, grad = model.batch_step(imgs, labels, masks)
            if not np.isfinite(loss):
                raise TrainDiverged(f"loss became non-finite at epoch {epoch}")
            velocity = cfg.momentum * velocity - lr * grad
            model.set_flat_params(model.flat_params() + velocity)
            ep_loss += loss * len(idx)
            ep_acc += acc * len(idx)
            seen += len(idx)

        val_probs = model.predict_proba(val_imgs)
        eps = 1e-300
        val_loss = -float(np.mean(np.log(
            val_probs[np.arange(len(val_labels)), val_labels] + eps)))
        val_acc = float(np.mean(val_probs.argmax(axis=1) == val_labels))
        history.append({
            "epoch": epoch,
            "train_loss": ep_loss / seen,
            "train_acc": ep_acc / seen,
            "val_loss": val_loss,
            "val_acc": val_acc,
            "lr": lr,
        })

        if val_loss < best_val:
            best_val = val_loss
            stale = 0
            plateau_stale = 0
        else:
            stale += 1
            plateau_stale += 1
            if plateau_stale >= cfg.plateau_patience:
                lr = max(lr * cfg.plateau_factor, cfg.lr_floor)
                plateau_stale = 0
            if stale >= cfg.patience:
                break
    return model, history


def _class_index(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    try:
        return CLASSES.index(label)
    except ValueError:
        raise ValueError(f"label {label!r} not in {CLASSES}") from None


# ----------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float | None
    recall: float | None
    specificity: float | None
    precision: float | None
    f1: float | None

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_lines(self) -> list:
        def fmt(v):
            return "undefined" if v is None else f"{v:.6f}"
        return [
            f"confusion tp={self.tp} fp={self.fp} tn={self.tn} fn={self.fn}",
            f"accuracy {fmt(self.accuracy)}",
            f"recall {fmt(self.recall)}",
            f"specificity {fmt(self.specificity)}",
            f"precision {fmt(self.precision)}",
            f"f1 {fmt(self.f1)}",
        ]


def metrics_from_counts(tp: int, fp: int, tn: int, fn: int) -> MetricsReport:
    """Standard formulas, with zero-denominator metrics reported as undefined
    (None), never as 0."""
    def ratio(num, den):
        return None if den == 0 else num / den

    n = tp + fp + tn + fn
    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricsReport(
        tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=ratio(tp + tn, n),
        recall=recall,
        specificity=ratio(tn, tn + fp),
        precision=precision,
        f1=f1,
    )


def evaluate(model: Classifier, test_items) -> MetricsReport:
    """Confusion counts and the metric suite on a held-out set, with
    malignant as the positive class."""
    if not test_items:
        raise ValueError("empty test set")
    imgs = [it[0] for it in test_items]
    truth = np.asarray([_class_index(_label_of(it)) for it in test_items])
    pred = model.predict(imgs)
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    tn = int(np.sum((pred == 0) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    return metrics_from_counts(tp, fp, tn, fn)


def confusion_block(report: MetricsReport) -> str:
    """2x2 text block, rows = truth (benign, malignant), cols = prediction."""
    return (
        f"truth\\pred\tbenign\tmalignant\n"
        f"benign\t{report.tn}\t{report.fp}\n"
        f"malignant\t{report.fn}\t{report.tp}\n"
    )


def compare_pre_post(pre: MetricsReport, post: MetricsReport) -> dict:
    """Metric deltas (post minus pre); None when either side is undefined."""
    out = {}
    for name in ("accuracy", "recall", "specificity", "precision", "f1"):
        a, b = getattr(pre, name), getattr(post, name)
        out[name] = None if a is None or b is None else b - a
    return out


# --------------------------------------------------- distributed adapter


class ClassifierTask:
    """Gradient-step contract for the data-parallel harness.

    Batch normalization is disabled here: per-batch statistics are shard
    local, which would make the averaged gradient differ from the union-batch
    gradient. Dropout masks are derived per (step, sample), so the same
    sample gets the same mask no matter which worker computes it.
    """

    def __init__(self, items, cfg: TrainConfig = None, backbone_seed: int = DEFAULT_FEATURE_SEED,
                 seed: int = 0):
        cfg = cfg or TrainConfig()
        if cfg.batchnorm:
            cfg = replace(cfg, batchnorm=False)
        self.cfg = cfg
        self.seed = seed
        self.backbone_seed = backbone_seed
        self.images = [it[0] for it in items]
        self.labels = [_class_index(_label_of(it)) for it in items]
        self._template = Classifier(
            build_network(classifier_backbone_spec(), backbone_seed), cfg, head_seed=seed)

    @property
    def batch_size(self) -> int:
        return self.cfg.batch_size

    def init_params(self) -> np.ndarray:
        return self._template.flat_params()

    def grad(self, params: np.ndarray, indices, step: int):
        model = self._template.clone()
        model.set_flat_params(params)
        feat = model.dense_w.shape[1]
        masks = np.stack([
            make_dropout_masks(
                np.random.default_rng((self.seed, step, int(i))), 1, feat,
                self.cfg.dropout)[0]
            for i in indices
        ])
        imgs = [self.images[i] for i in indices]
        labels = [self.labels[i] for i in indices]
        loss, _, grad = model.batch_step(imgs, labels, masks, update_running=False)
        return loss, grad

    def apply(self, params: np.ndarray, velocity: np.ndarray, grad: np.ndarray):
        velocity = self.cfg.momentum * velocity - self.cfg.lr * grad
        return params + velocity, velocity
