"""Mini-batch training and evaluation loops."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops, optim
from .autodiff import Tape
from .checkpoint import Checkpoint
from .config import TrainConfig
from .network import Network, NetworkSpec, build_network
from .pathfinder import read_pfds
from .tensor import InvalidArgument, SeededRng

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "train_loss", "train_acc", "eval_loss", "eval_acc", "lr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, X, Y, C)
    labels: np.ndarray  # (N,)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_pfds(cls, path, limit: int = 0) -> "Dataset":
        images, labels = read_pfds(path)
        if limit:
            images, labels = images[:limit], labels[:limit]
        return cls(images[..., None], labels.astype(np.int64))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict] = field(default_factory=list)

    def metrics_csv(self) -> str:
        return format_metrics(self.metrics)


def format_metrics(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for row in rows:
        writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])
    return buf.getvalue()


def predict_logits(net: Network, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [net.forward(images[i:i + batch_size], train=False) for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.spec.n_classes))


def accuracy_and_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Argmax accuracy (ties go to the lower class index) and mean cross-entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    pred = np.argmax(logits, axis=1)
    acc = float(np.mean(pred == labels))
    logp = ops.log_softmax(logits)
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    return acc, loss


def evaluate(net: Network, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Eval-mode accuracy and mean cross-entropy; never mutates the network."""
    if tuple(data.images.shape[1:]) != tuple(net.spec.input_shape):
        raise InvalidArgument(f"dataset images {data.images.shape[1:]} do not match network input {net.spec.input_shape}")
    return accuracy_and_loss(predict_logits(net, data.images, batch_size), data.labels)


def _first_nonfinite(net: Network, nodes) -> str:
    for layer, node in zip(net.layers, nodes[1:]):
        if not np.all(np.isfinite(node.value)):
            return layer.name
    for name, arr in net.named_params().items():
        if not np.all(np.isfinite(arr)):
            return f"parameter {name}"
    return "loss"


def train_step(net: Network, opt: optim.OptimizerState, xb, yb, l2: float, rng) -> tuple[float, float]:
    tape = Tape()
    logits, _, pvars, nodes = net.forward(xb, train=True, rng=rng, tape=tape, input_grad=False)
    reg = [pvars[n] for n in net.regularized_names()]
    loss = ops.softmax_cross_entropy_l2(logits, yb, reg, l2)
    if not np.isfinite(loss.value):
        raise TrainingDiverged(f"non-finite loss; first offending layer: {_first_nonfinite(net, nodes)}")
    grads = tape.backward(loss)
    params = net.named_params()
    optim.apply(opt, params, {name: grads[var] for name, var in pvars.items()})
    out = logits.value
    tape.release()
    pred = np.argmax(out, axis=1)
    logp = ops.log_softmax(out.astype(np.float64))
    ce = float(-logp[np.arange(len(yb)), yb].mean())
    return ce, float(np.mean(pred == yb))


def fit(net: Network, cfg: TrainConfig, train_data: Dataset, test_data: Dataset | None,
        progress=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs; evaluation after each epoch drives the plateau schedule.

    Batches smaller than 8 at the end of an epoch are dropped.
    """
    cfg.validate()
    if tuple(train_data.images.shape[1:]) != tuple(net.spec.input_shape):
        raise InvalidArgument("training images do not match the network input shape")
    opt = optim.OptimizerState(cfg.optimizer, cfg.lr)
    root = SeededRng(cfg.seed, 0x7EA1)
    n = len(train_data)
    rows: list[dict] = []
    errors: list[float] = []
    lr = cfg.lr
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = lr
        erng = root.spawn(epoch)
        order = erng.permutation(n)
        drop_rng = erng.spawn(1)
        losses, accs, weights = [], [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 8:
                break
            xb = train_data.images[idx].astype(net.dtype)
            yb = train_data.labels[idx]
            loss, acc = train_step(net, opt, xb, yb, cfg.l2, drop_rng)
            losses.append(loss)
            accs.append(acc)
            weights.append(len(idx))
            if progress is not None:
                progress(epoch, start + len(idx), n, loss)
        w = np.asarray(weights, dtype=np.float64)
        tr_loss = float(np.dot(losses, w) / w.sum()) if len(w) else float("nan")
        tr_acc = float(np.dot(accs, w) / w.sum()) if len(w) else float("nan")
        if test_data is not None and len(test_data):
            ev_acc, ev_loss = evaluate(net, test_data)
        else:
            ev_acc, ev_loss = tr_acc, tr_loss
        rows.append({"epoch": epoch, "train_loss": tr_loss, "train_acc": tr_acc,
                     "eval_loss": ev_loss, "eval_acc": ev_acc, "lr": lr})
        log.info("epoch %d: train loss %.4f acc %.4f | eval loss %.4f acc %.4f | lr %.3g",
                 epoch, tr_loss, tr_acc, ev_loss, ev_acc, lr)
        errors.append(1.0 - ev_acc)
        lr = optim.plateau_schedule(errors, cfg.lr, cfg.patience, cfg.decay_factor, cfg.min_delta)
    history = [[r[k] for k in METRIC_FIELDS] for r in rows]
    ckpt = Checkpoint(net, opt, epoch=len(rows), seed=cfg.seed,
                      rng_state={"seed": cfg.seed, "epochs_consumed": len(rows)}, history=history)
    return TrainResult(ckpt, rows)


def train(cfg: TrainConfig, spec: NetworkSpec, progress=None) -> TrainResult:
    """Load the PFDS datasets named in ``cfg``, build ``spec`` and fit it."""
    train_data = Dataset.from_pfds(cfg.train_data, cfg.max_train)
    test_data = Dataset.from_pfds(cfg.test_data, cfg.max_test) if cfg.test_data else None
    net = build_network(spec, seed=cfg.seed, dtype=np.dtype(cfg.dtype).type)
    return fit(net, cfg, train_data, test_data, progress)


def write_metrics(path, rows: list[dict]) -> None:
    path = Path(path)
    try:
        path.write_text(format_metrics(rows), encoding="utf-8", newline="\n")
    except OSError as exc:
        raise OSError(f"cannot write metrics {path}: {exc.strerror or exc}") from exc
