"""Training loop, optimizer, evaluation and checkpoints."""

import ast
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .capsnet import NetworkConfig, build_network
from .data import ImageBatch, load_mnist, load_smallnorb, preprocess, random_subset, stratified_split
from .memory import tune_allocator

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "crl-v1"
MANIFEST = "manifest.txt"
METRICS_HEADER = ("epoch", "train_loss", "val_acc", "lr", "wall_time")


class TrainingAborted(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# loss and schedules
# ---------------------------------------------------------------------------

def spread_loss(scores, targets, margin):
    """Batch mean of sum_{i != t} max(0, m - (a_t - a_i))^2.

    ``scores`` is a (B, O) tensor of class activations, ``targets`` B ints.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    b, o = scores.shape
    if targets.shape[0] != b:
        raise T.ShapeError(f"spread_loss: {b} score rows but {targets.shape[0]} targets")
    if np.any(targets < 0) or np.any(targets >= o):
        raise ValueError(f"spread_loss: target outside [0, {o})")
    if not 0 < margin < 1:
        raise ValueError("spread_loss: margin must lie in (0, 1)")
    onehot = np.zeros((b, o), dtype=scores.dtype)
    onehot[np.arange(b), targets] = 1.0
    a_t = T.sum_(scores * onehot, -1, keepdims=True)
    gap = T.relu(margin - (a_t - scores))
    per_class = T.square(gap) * (1.0 - onehot)
    return T.sum_(per_class) / float(b)


def margin_schedule(step, total_steps, start=0.2, end=0.9):
    """Linear ramp from ``start`` at step 0 to ``end`` at the last step."""
    if total_steps <= 1:
        return end
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return start + (end - start) * frac


def learning_rate(step, base=3e-3, decay_rate=0.96, decay_steps=1000):
    return base * decay_rate ** (step / decay_steps)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def global_norm(grads):
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


class Adam:
    """Adam with bias correction. ``step`` applies one update in place."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0
        self.rejected = 0

    def step(self, grads, lr):
        """Returns False (and leaves everything untouched) if any gradient
        is non-finite."""
        grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(self.params, grads)]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.rejected += 1
            log.warning("non-finite gradient at step %d: update skipped", self.t)
            return False
        if self.clip_norm is not None:
            norm = global_norm(grads)
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
        return True


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    procedure: str = "similarity"
    dataset: str = "mnist"
    data_dir: str = ""
    architecture: str = "reduced"
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0
    iterations: int = 3
    precision: int = 32
    learning_rate: float = 3e-3
    decay_rate: float = 0.96
    decay_steps: int = 0          # 0 means one epoch worth of steps
    margin_start: float = 0.2
    margin_end: float = 0.9
    clip_norm: float = 10.0
    train_subset: int = 0         # 0 means the whole training set
    test_subset: int = 0
    val_fraction: float = 0.1
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.procedure not in ("similarity", "connectionist"):
            raise ValueError(f"unknown routing procedure {self.procedure!r}")
        if self.dataset not in ("mnist", "smallnorb"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.architecture not in ("full", "reduced"):
            raise ValueError(f"architecture must be 'full' or 'reduced', got {self.architecture!r}")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if not 0 < self.margin_start <= self.margin_end < 1:
            raise ValueError("margins must satisfy 0 < start <= end < 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    def network_config(self):
        classes = 10 if self.dataset == "mnist" else 5
        make = NetworkConfig.reduced if self.architecture == "reduced" else NetworkConfig
        return make(procedure=self.procedure, num_classes=classes, iterations=self.iterations, seed=self.seed)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

@dataclass
class DataSplits:
    train: ImageBatch
    val: ImageBatch
    test: ImageBatch
    raw_inputs: bool = False   # smallNORB source images need per-batch preprocessing

    def inputs(self, images, mode, rng=None):
        if not self.raw_inputs:
            return images
        return preprocess(images, mode, rng)

    def eval_transform(self):
        return (lambda x: preprocess(x, "eval")) if self.raw_inputs else None


def load_splits(cfg):
    if not cfg.data_dir:
        raise FileNotFoundError("no data directory given")
    if not os.path.isdir(cfg.data_dir):
        raise FileNotFoundError(f"data directory {cfg.data_dir!r} does not exist")
    if cfg.dataset == "mnist":
        train, test = load_mnist(cfg.data_dir)
    else:
        train, test = load_smallnorb(cfg.data_dir)
    return make_splits(cfg, train, test)


def make_splits(cfg, train, test):
    """Apply the configured subsets and carve the stratified validation set
    out of the (subset) training batch."""
    train = train.subset(random_subset(len(train), cfg.train_subset or None, cfg.seed))
    test = test.subset(random_subset(len(test), cfg.test_subset or None, cfg.seed + 1))
    keep, held = stratified_split(train.labels, cfg.val_fraction, cfg.seed)
    return DataSplits(train.subset(keep), train.subset(held), test, cfg.dataset == "smallnorb")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray   # rows: true class, columns: prediction

    @property
    def count(self):
        return int(self.confusion.sum())


def predict(model, images, batch_size=64, transform=None):
    """Class activations for ``images`` with the model in inference mode.
    ``transform`` is applied to each chunk before the forward pass."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                x = images[i:i + batch_size]
                if transform is not None:
                    x = transform(x)
                out.append(model(T.tensor(x)).data)
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.num_classes))


def evaluate(model, batch, batch_size=64, transform=None):
    """Accuracy and confusion counts; argmax ties go to the lowest index."""
    scores = predict(model, batch.images, batch_size, transform)
    pred = np.argmax(scores, axis=-1)
    o = model.cfg.num_classes
    confusion = np.zeros((o, o), dtype=np.int64)
    np.add.at(confusion, (batch.labels, pred), 1)
    acc = float(np.mean(pred == batch.labels)) if len(pred) else 0.0
    return EvalResult(acc, confusion)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _tensors(model):
    out = [(name, p.data) for name, p in model.named_parameters()]
    out += [(name, arr) for name, arr in model.named_buffers()]
    return out


def _format_value(v):
    return repr(tuple(v) if isinstance(v, list) else v)


def save_checkpoint(model, directory, meta=None):
    """Write a manifest plus one little-endian float32 blob per tensor."""
    os.makedirs(directory, exist_ok=True)
    lines = [f"format = {CHECKPOINT_VERSION}"]
    for key, val in model.cfg.to_dict().items():
        lines.append(f"model.{key} = {_format_value(val)}")
    for key, val in (meta or {}).items():
        lines.append(f"meta.{key} = {_format_value(val)}")
    for name, arr in _tensors(model):
        fname = f"{name}.bin"
        np.asarray(arr, dtype="<f4").tofile(os.path.join(directory, fname))
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"tensor.{name} = {shape} {fname}")
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(directory):
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise CheckpointError(f"no {MANIFEST} in {directory}")
    entries = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            key, sep, val = line.partition(" = ")
            if not sep:
                raise CheckpointError(f"{path}:{lineno}: expected 'key = value'")
            entries[key] = val
    if entries.get("format") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {entries.get('format')!r}")
    return entries


def load_checkpoint(directory, model=None):
    """Restore tensors into ``model`` (built from the manifest if omitted)."""
    entries = read_manifest(directory)
    if model is None:
        spec = {k[6:]: ast.literal_eval(v) for k, v in entries.items() if k.startswith("model.")}
        model = build_network(NetworkConfig(**spec))
    tensors = {k[7:]: v for k, v in entries.items() if k.startswith("tensor.")}
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | set(buffers)
    if set(tensors) != expected:
        missing, extra = expected - set(tensors), set(tensors) - expected
        raise CheckpointError(f"checkpoint does not match model: missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)}")
    for name, spec in tensors.items():
        shape_s, fname = spec.split(" ", 1)
        shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
        target = params[name].data if name in params else buffers[name]
        if shape != target.shape:
            raise T.ShapeError(f"checkpoint tensor {name} has shape {shape}, model expects {target.shape}")
        blob = np.fromfile(os.path.join(directory, fname), dtype="<f4")
        if blob.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{fname}: {blob.size} values for shape {shape}")
        target[...] = blob.reshape(shape)
    return model


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best_val_acc: float
    best_epoch: int
    test: EvalResult
    history: list = field(default_factory=list)
    checkpoint: str = ""
    metrics: str = ""


def _metrics_line(values):
    epoch, loss, acc, lr, wall = values
    return f"{epoch}\t{loss:.9g}\t{acc:.6f}\t{lr:.9g}\t{wall:.3f}"


def train(cfg, splits=None, progress=None):
    """Run ``cfg.epochs`` epochs; checkpoint on validation improvement and
    report the test accuracy of the best checkpoint."""
    tune_allocator()
    with T.precision(cfg.precision):
        return _train(cfg, splits if splits is not None else load_splits(cfg), progress)


def _train(cfg, splits, progress):
    rng = np.random.default_rng(cfg.seed)
    model = build_network(cfg.network_config())
    model.train()
    params = model.parameters()
    opt = Adam(params, clip_norm=cfg.clip_norm)
    n = len(splits.train)
    per_epoch = -(-n // cfg.batch_size)
    decay_steps = cfg.decay_steps or per_epoch
    total = per_epoch * cfg.epochs
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_dir = os.path.join(cfg.out_dir, "checkpoint")
    metrics_path = os.path.join(cfg.out_dir, "metrics.tsv")
    with open(metrics_path, "w") as fh:
        fh.write("\t".join(METRICS_HEADER) + "\n")

    best_acc, best_epoch, history = -1.0, 0, []
    step, bad_losses = 0, 0
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        lr = learning_rate(step, cfg.learning_rate, cfg.decay_rate, decay_steps)
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            x = splits.inputs(splits.train.images[idx], "train", rng)
            y = splits.train.labels[idx]
            margin = margin_schedule(step, total, cfg.margin_start, cfg.margin_end)
            lr = learning_rate(step, cfg.learning_rate, cfg.decay_rate, decay_steps)
            for p in params:
                p.grad = None
            with T.Tape() as tape:
                loss = spread_loss(model(T.tensor(x)), y, margin)
                value = float(loss.data)
                if not math.isfinite(value):
                    bad_losses += 1
                    log.warning("non-finite loss at step %d (%d in a row)", step, bad_losses)
                    if bad_losses >= 3:
                        raise TrainingAborted(f"loss non-finite for 3 consecutive batches (last at step {step})")
                    step += 1
                    continue
                bad_losses = 0
                T.backward(loss, tape)
            opt.step([p.grad for p in params], lr)
            losses.append(value)
            step += 1
            if progress:
                progress(epoch, step, value)
        val = evaluate(model, splits.val, transform=splits.eval_transform())
        row = (epoch, float(np.mean(losses)) if losses else float("nan"), val.accuracy, lr,
               time.perf_counter() - start)
        history.append(row)
        with open(metrics_path, "a") as fh:
            fh.write(_metrics_line(row) + "\n")
        log.info("epoch %d: loss %.4f, val acc %.4f", epoch, row[1], val.accuracy)
        if val.accuracy > best_acc:
            best_acc, best_epoch = val.accuracy, epoch
            save_checkpoint(model, ckpt_dir, {"epoch": epoch, "val_acc": val.accuracy})

    best = load_checkpoint(ckpt_dir)
    test = evaluate(best, splits.test, transform=splits.eval_transform())
    return TrainResult(best_acc, best_epoch, test, history, ckpt_dir, metrics_path)


def evaluate_checkpoint(directory, batch, transform=None, precision=32):
    with T.precision(precision):
        return evaluate(load_checkpoint(directory), batch, transform=transform)
