"""End-to-end training loop: SGD with momentum and milestone lr decay over the
combined objective (supervised cross-entropy on the labeled portion plus the
two contrast heads on the full batch), with ablation switches, metrics
logging, evaluation, and feature export.

Determinism contract: ``fit`` is a pure function of (config, datasets, seed);
two runs with identical inputs produce bit-identical metrics. Wall-clock
timing is therefore off by default (the wall_ms column logs 0); enable
``record_wall_time`` for real timings at the cost of byte-identical reruns.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentPolicy, make_view_pair
from .autodiff import Tape, backward
from .data import Batch, Dataset, SemiSplit, batch_iter
from .losses import (
    LossBreakdown,
    feature_contrast_graph,
    masked_cross_entropy_graph,
    semantic_contrast_graph,
    total_loss,
)
from .model import (
    ModelDims,
    ModelParams,
    classify,
    classify_graph,
    encode,
    encode_graph,
    init_params,
    param_nodes,
    save_checkpoint,
)
from .numerics import ConfigError, Rng, Tensor

__all__ = [
    "TrainConfig",
    "SgdState",
    "MetricsRow",
    "METRICS_HEADER",
    "lr_at",
    "sgd_step",
    "TrainBatch",
    "make_train_batch",
    "train_step",
    "fit",
    "evaluate",
    "export_features",
    "write_metrics_csv",
    "read_metrics_csv",
    "grad_check_suite",
]


@dataclass(frozen=True)
class TrainConfig:
    """Full hyperparameter record for one training run (desk-scale defaults).

    The milestone schedule multiplies the learning rate by ``decay_factor``
    at each milestone epoch; the default 100-epoch schedule with milestones
    (50, 75) keeps the shape of the reference 1000-epoch recipe with
    milestones (500, 750).
    """

    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 100
    milestones: tuple[int, ...] = (50, 75)
    decay_factor: float = 0.1
    batch: int = 128
    tau_f: float = 0.5
    tau_s: float = 0.9
    w_ce: float = 1.0
    w_z: float = 1.0
    w_q: float = 1.0
    use_feature_contrast: bool = True
    use_semantic_contrast: bool = True
    normalize_contrast: bool = True
    classifier_temperature: float = 1.0
    hidden: tuple[int, ...] = (64,)
    feature_dim: int = 64
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    seed: int = 0
    eval_every: int = 1
    record_wall_time: bool = False

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.tau_f <= 0 or self.tau_s <= 0:
            raise ConfigError("contrast temperatures must be > 0")
        if min(self.w_ce, self.w_z, self.w_q) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch < 2:
            raise ConfigError(f"batch must be >= 2, got {self.batch}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")

    @property
    def loss_weights(self) -> tuple[float, float, float]:
        return (self.w_ce, self.w_z, self.w_q)

    @property
    def contrast_enabled(self) -> bool:
        return self.use_feature_contrast or self.use_semantic_contrast


@dataclass
class SgdState:
    """Momentum buffers mirroring the parameter tree, plus a step counter."""

    velocity: dict[str, Tensor]
    step_count: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "SgdState":
        return cls({name: np.zeros_like(arr) for name, arr in params.named()})


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    lr: float
    loss_total: float
    loss_ce: float
    loss_z: float
    loss_q: float
    train_acc: float
    test_acc: float
    wall_ms: float


METRICS_HEADER = "epoch,lr,loss_total,loss_ce,loss_z,loss_q,train_acc,test_acc,wall_ms"


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """lr0 decayed once per milestone that has been reached by `epoch` (0-based)."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr0 * cfg.decay_factor**passed


def sgd_step(
    params: ModelParams,
    grads: dict[str, Tensor],
    state: SgdState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> tuple[ModelParams, SgdState]:
    """One momentum-SGD update: v <- mu v + g + wd p; p <- p - lr v (functional)."""
    new_velocity = {}
    new_params = params
    for name, value in params.named():
        g = grads[name]
        if g.shape != value.shape:
            raise ConfigError(
                f"gradient for {name} has shape {g.shape}, expected {value.shape}"
            )
        if not np.isfinite(g).all():
            raise RuntimeError(f"non-finite gradient in parameter {name}")
        v = momentum * state.velocity[name] + g + weight_decay * value
        new_velocity[name] = v
        new_params = new_params.replace(name, value - lr * v)
    return new_params, SgdState(new_velocity, state.step_count + 1)


@dataclass(frozen=True)
class TrainBatch:
    """Raw arrays for one optimization step.

    The labeled portion comes first; ``onehot`` rows are all-zero for
    unlabeled samples. ``sample_ids`` are dataset indices, used to key
    per-sample augmentation streams.
    """

    x: Tensor
    onehot: Tensor
    labeled_count: int
    sample_ids: np.ndarray


def make_train_batch(ds: Dataset, batch: Batch) -> TrainBatch:
    idx = np.concatenate([batch.labeled_idx, batch.unlabeled_idx])
    x = ds.x[idx]
    onehot = np.zeros((len(idx), ds.class_count))
    n_lab = len(batch.labeled_idx)
    if n_lab:
        onehot[np.arange(n_lab), ds.y[batch.labeled_idx]] = 1.0
    return TrainBatch(x=x, onehot=onehot, labeled_count=n_lab, sample_ids=idx)


def train_step(
    params: ModelParams, batch: TrainBatch, cfg: TrainConfig, rng: Rng, ds: Dataset
) -> tuple[dict[str, Tensor], LossBreakdown]:
    """Forward, loss assembly, and backward for one batch.

    Both views pass through the same encoder parameters; cross-entropy sees
    only the labeled rows of the clean view, while both contrast heads see the
    full batch (labeled samples contribute to the unsupervised terms too).
    """
    if batch.labeled_count == 0 and cfg.w_ce > 0:
        raise ConfigError("batch has no labeled samples but the supervised weight is > 0")

    if cfg.contrast_enabled:
        view1, view2 = make_view_pair(batch.x, rng, cfg.augment, batch.sample_ids)
    else:
        view1, view2 = batch.x, None

    tape = Tape()
    nodes = param_nodes(tape, params)
    x1 = tape.constant(ds.model_inputs(view1))
    z1 = encode_graph(tape, nodes, x1)
    q1 = classify_graph(tape, nodes, z1, cfg.classifier_temperature)

    ce_node = masked_cross_entropy_graph(tape, q1, batch.onehot, batch.labeled_count)
    terms = [tape.scale(ce_node, cfg.w_ce)]

    lz_node = None
    lq_node = None
    if cfg.contrast_enabled:
        x2 = tape.constant(ds.model_inputs(view2))
        z2 = encode_graph(tape, nodes, x2)
        if cfg.use_feature_contrast:
            lz_node = feature_contrast_graph(
                tape, z1, z2, cfg.tau_f, cfg.normalize_contrast
            )
            terms.append(tape.scale(lz_node, cfg.w_z))
        if cfg.use_semantic_contrast:
            q2 = classify_graph(tape, nodes, z2, cfg.classifier_temperature)
            lq_node = semantic_contrast_graph(
                tape, q1, q2, cfg.tau_s, cfg.normalize_contrast
            )
            terms.append(tape.scale(lq_node, cfg.w_q))

    out = terms[0]
    for t in terms[1:]:
        out = tape.add(out, t)
    tape.finalize()

    node_grads = backward(tape, out)
    grads = {name: node_grads[nid] for name, nid in nodes.items()}
    ce_val = float(tape.value(ce_node))
    lz_val = float(tape.value(lz_node)) if lz_node is not None else 0.0
    lq_val = float(tape.value(lq_node)) if lq_node is not None else 0.0
    if not all(math.isfinite(v) for v in (ce_val, lz_val, lq_val)):
        raise RuntimeError(
            f"training diverged: non-finite loss components "
            f"(ce={ce_val!r}, feature={lz_val!r}, semantic={lq_val!r})"
        )
    return grads, total_loss(ce_val, lz_val, lq_val, cfg.loss_weights)


def evaluate(params: ModelParams, ds: Dataset) -> float:
    """Argmax accuracy of the classifier over a labeled dataset (ties -> lowest class)."""
    probs = classify(params, encode(params, ds.model_inputs()))
    return float((probs.argmax(axis=1) == ds.y).mean())


def fit(
    cfg: TrainConfig,
    ds: Dataset,
    split: SemiSplit,
    test_ds: Dataset | None = None,
    checkpoint_path=None,
) -> tuple[ModelParams, list[MetricsRow]]:
    """Run the full optimization loop and return final parameters plus metrics.

    With both contrast heads disabled the run is a supervised-only baseline:
    batches then draw from the labeled pool alone (the unlabeled set plays no
    role whatsoever), with the batch size clamped to that pool. Divergence
    aborts the run: any non-finite epoch loss, or an epoch loss above 10x the
    initial value for 5 consecutive epochs.
    """
    if cfg.contrast_enabled:
        loop_split, loop_batch = split, cfg.batch
    else:
        loop_split = SemiSplit(split.labeled_idx, np.empty(0, dtype=np.int64))
        loop_batch = min(cfg.batch, max(2, split.n_labeled))

    rng = Rng(cfg.seed)
    dims = ModelDims(ds.flat_dim, cfg.hidden, cfg.feature_dim, ds.class_count)
    params = init_params(rng.substream("init"), dims)
    state = SgdState.zeros(params)

    metrics: list[MetricsRow] = []
    initial_loss = None
    high_loss_streak = 0

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = lr_at(cfg, epoch)
        sums = np.zeros(4)  # total, ce, z, q
        n_batches = 0
        batches = batch_iter(ds, loop_split, loop_batch, rng.substream("batches", epoch))
        aug_rng = rng.substream("augment", epoch)
        for batch in batches:
            tb = make_train_batch(ds, batch)
            grads, lb = train_step(params, tb, cfg, aug_rng, ds)
            params, state = sgd_step(
                params, grads, state, lr, cfg.momentum, cfg.weight_decay
            )
            sums += (lb.total, lb.ce, lb.feature_contrast, lb.semantic_contrast)
            n_batches += 1
        mean_total, mean_ce, mean_z, mean_q = sums / n_batches

        if not math.isfinite(mean_total):
            raise RuntimeError(f"training diverged: non-finite loss at epoch {epoch + 1}")
        if initial_loss is None:
            initial_loss = mean_total
        high_loss_streak = high_loss_streak + 1 if mean_total > 10 * initial_loss else 0
        if high_loss_streak >= 5:
            raise RuntimeError(
                f"training diverged: loss above 10x its initial value for 5 "
                f"consecutive epochs (epoch {epoch + 1}, loss {mean_total:g})"
            )

        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            wall = (time.perf_counter() - started) * 1e3 if cfg.record_wall_time else 0.0
            metrics.append(
                MetricsRow(
                    epoch=epoch + 1,
                    lr=lr,
                    loss_total=mean_total,
                    loss_ce=mean_ce,
                    loss_z=mean_z,
                    loss_q=mean_q,
                    train_acc=evaluate(params, ds),
                    test_acc=evaluate(params, test_ds) if test_ds is not None else float("nan"),
                    wall_ms=wall,
                )
            )

    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    return params, metrics


def export_features(params: ModelParams, ds: Dataset, path) -> None:
    """Write one CSV row per sample: index, label, then the encoder features."""
    features = encode(params, ds.model_inputs())
    p = features.shape[1]
    header = "sample_index,label," + ",".join(f"f{i}" for i in range(p))
    lines = [header]
    for i in range(ds.n):
        feats = ",".join(_fmt(v) for v in features[i])
        lines.append(f"{i},{int(ds.y[i])},{feats}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _fmt(value: float) -> str:
    return f"{value:.9g}"


def write_metrics_csv(path, rows: list[MetricsRow], banner: list[str] | None = None) -> None:
    """Metrics table with the effective config echoed as '#' comment lines."""
    lines = [f"# {b}" for b in (banner or [])]
    lines.append(METRICS_HEADER)
    for r in rows:
        lines.append(
            f"{r.epoch},{_fmt(r.lr)},{_fmt(r.loss_total)},{_fmt(r.loss_ce)},"
            f"{_fmt(r.loss_z)},{_fmt(r.loss_q)},{_fmt(r.train_acc)},"
            f"{_fmt(r.test_acc)},{_fmt(r.wall_ms)}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_metrics_csv(path) -> tuple[list[str], list[MetricsRow]]:
    banner = []
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# "):
            banner.append(line[2:])
        elif line and line != METRICS_HEADER:
            parts = line.split(",")
            rows.append(
                MetricsRow(
                    epoch=int(parts[0]),
                    lr=float(parts[1]),
                    loss_total=float(parts[2]),
                    loss_ce=float(parts[3]),
                    loss_z=float(parts[4]),
                    loss_q=float(parts[5]),
                    train_acc=float(parts[6]),
                    test_acc=float(parts[7]),
                    wall_ms=float(parts[8]),
                )
            )
    return banner, rows


def grad_check_suite(
    trials: int = 20, tol: float = 1e-4, h: float = 1e-5, seed: int = 0
):
    """Finite-difference checks of the full training objective.

    Each trial draws a small random model and batch, then checks the gradient
    of the combined loss (cross-entropy + both contrast heads) with respect to
    every parameter tensor. Returns [(trial, param_name, GradCheckReport)].
    """
    from .autodiff import grad_check

    results = []
    for trial in range(trials):
        rng = Rng(seed).substream("gradcheck", trial)
        d = int(rng.integers(3, 7))
        width = int(rng.integers(4, 9))
        p = int(rng.integers(3, 7))
        c = int(rng.integers(2, 5))
        n = int(rng.integers(5, 9))
        n_lab = int(rng.integers(1, n + 1))
        dims = ModelDims(d, (width,), p, c)
        params = init_params(rng.substream("params"), dims)
        x1 = rng.substream("x1").normal((n, d))
        x2 = x1 + 0.1 * rng.substream("x2").normal((n, d))
        onehot = np.zeros((n, c))
        labels = rng.substream("labels").integers(0, c, n_lab)
        onehot[np.arange(n_lab), labels] = 1.0
        tau_f = float(rng.substream("tau_f").uniform(0.3, 1.2))
        tau_s = float(rng.substream("tau_s").uniform(0.5, 1.2))

        def objective(vary: str):
            def build(tape: Tape, xid: int) -> int:
                nodes = {
                    name: (xid if name == vary else tape.constant(arr))
                    for name, arr in params.named()
                }
                z1 = encode_graph(tape, nodes, tape.constant(x1))
                z2 = encode_graph(tape, nodes, tape.constant(x2))
                q1 = classify_graph(tape, nodes, z1)
                q2 = classify_graph(tape, nodes, z2)
                ce = masked_cross_entropy_graph(tape, q1, onehot, n_lab)
                lz = feature_contrast_graph(tape, z1, z2, tau_f)
                lq = semantic_contrast_graph(tape, q1, q2, tau_s)
                return tape.add(tape.add(ce, lz), lq)

            return build

        for name, arr in params.named():
            report = grad_check(objective(name), arr, h=h, tol=tol)
            results.append((trial, name, report))
    return results
