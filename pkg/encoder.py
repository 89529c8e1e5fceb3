"""
Encoder - stage one of the two-step optimization.

A per-frame MLP is trained on a duration-related task (progress or RSD
regression, progress or RSD classification, or phase classification for the
TimeLSTM-style variant), then frozen; its penultimate layer is the feature
tap the sequence stage consumes.
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from numkernel import (
    SgdConfig,
    Tensor,
    clip_grad_norm,
    cross_entropy,
    dropout,
    init_uniform,
    linear_backward,
    linear_forward,
    relu,
    relu_backward,
    resolve_dtype,
    sgd_step,
    sigmoid,
    smooth_l1,
)
from rsdcommon import CheckpointError, ConfigError, NumericError, SplitError, parallel_map
from rsdio import ModelCheckpoint
from synthsurg import Dataset, DatasetSplit, FrameLabels, FrameSequence, index_dataset

TASK_KINDS = (
    "rsd_classification",
    "progress_classification",
    "rsd_regression",
    "progress_regression",
    "phase_classification",
)


@dataclass(frozen=True)
class EncoderTask:
    kind: str
    bin_width_min: Optional[float] = None
    max_bins: Optional[int] = None
    n_classes: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"Unknown encoder task '{self.kind}'. Available: {list(TASK_KINDS)}")
        wants_bins = self.kind == "rsd_classification"
        wants_classes = self.kind in ("progress_classification", "phase_classification")
        has_bins = self.bin_width_min is not None or self.max_bins is not None
        if wants_bins != has_bins:
            raise ConfigError(f"{self.kind}: bin_width_min/max_bins present iff rsd_classification")
        if wants_bins and (self.bin_width_min <= 0 or self.max_bins < 1):
            raise ConfigError(f"{self.kind}: bin_width_min > 0 and max_bins >= 1 required")
        if wants_classes != (self.n_classes is not None):
            raise ConfigError(f"{self.kind}: n_classes present iff a class-count task")
        if wants_classes and self.n_classes < 2:
            raise ConfigError(f"{self.kind}: n_classes >= 2 required")

    @classmethod
    def create(cls, kind: str, **params: Any) -> "EncoderTask":
        """Task with defaults filled in; accepts CLI spellings like 'progress-regression'."""
        kind = kind.replace("-", "_")
        if kind == "rsd_classification":
            params.setdefault("bin_width_min", 3.0)
            params.setdefault("max_bins", 20)
        elif kind == "progress_classification":
            params.setdefault("n_classes", 10)
        return cls(kind=kind, **params)

    @property
    def is_classification(self) -> bool:
        return self.kind.endswith("classification")

    @property
    def output_size(self) -> int:
        if self.kind == "rsd_classification":
            return self.max_bins
        if self.is_classification:
            return self.n_classes
        return 1

    @property
    def slug(self) -> str:
        return self.kind.replace("_", "-")

    def to_dict(self) -> Dict[str, Any]:
        return {k: v for k, v in self.__dict__.items() if v is not None}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EncoderTask":
        return cls(**data)


def label_for_task(task: EncoderTask, labels: FrameLabels, s_norm: float = 1.0) -> np.ndarray:
    """Per-frame training target for the task.

    Classification bins are right-open; the top bin also absorbs everything
    above it. Bin 0 holds the last `bin_width_min` minutes of a surgery.
    """
    if task.kind == "rsd_classification":
        bins = np.floor(labels.rsd_min / task.bin_width_min).astype(np.int64)
        return np.minimum(bins, task.max_bins - 1)
    if task.kind == "progress_classification":
        classes = np.floor(labels.progress * task.n_classes).astype(np.int64)
        return np.minimum(classes, task.n_classes - 1)
    if task.kind == "phase_classification":
        return labels.phase_id.astype(np.int64)
    if task.kind == "rsd_regression":
        return labels.rsd_min / s_norm
    return labels.progress.copy()


class EncoderNet:
    """(linear, ReLU) blocks followed by a task head; the last block is the feature tap."""

    def __init__(
        self,
        task: EncoderTask,
        input_dim: int,
        hidden_sizes: Sequence[int] = (64, 64),
        dropout_p: float = 0.1,
        s_norm: float = 1.0,
        seed: int = 0,
        dtype=np.float32,
    ):
        if not hidden_sizes:
            raise ConfigError("EncoderNet needs at least one hidden layer (the feature tap)")
        self.task = task
        self.input_dim = input_dim
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        self.dropout_p = dropout_p
        self.s_norm = s_norm
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.params: Dict[str, Tensor] = {}
        fan_in = input_dim
        for i, width in enumerate(self.hidden_sizes):
            self._add(f"hidden{i}.W", init_uniform(rng, (fan_in, width), fan_in, dtype))
            self._add(f"hidden{i}.b", np.zeros(width, dtype=dtype))
            fan_in = width
        self._add("head.W", init_uniform(rng, (fan_in, task.output_size), fan_in, dtype))
        self._add("head.b", np.zeros(task.output_size, dtype=dtype))

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(name, data)

    @property
    def penultimate_dim(self) -> int:
        return self.hidden_sizes[-1]

    def _p(self, name: str) -> np.ndarray:
        return self.params[name].data

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise CheckpointError(
                f"encoder expects {self.input_dim}-dim frames, got array of shape {x.shape}"
            )

    def forward(
        self, x: np.ndarray, train: bool = False, rng: Optional[np.random.Generator] = None
    ) -> Tuple[np.ndarray, np.ndarray, List[Any]]:
        """Return (head output, penultimate activations, cache)."""
        self._check_input(x)
        a = x.astype(self.dtype, copy=False)
        caches = []
        for i in range(len(self.hidden_sizes)):
            z, lin_cache = linear_forward(a, self._p(f"hidden{i}.W"), self._p(f"hidden{i}.b"))
            a, mask = dropout(relu(z), self.dropout_p, train, rng)
            caches.append((lin_cache, z, mask))
        out, head_cache = linear_forward(a, self._p("head.W"), self._p("head.b"))
        caches.append(head_cache)
        return out, a, caches

    def features(self, x: np.ndarray) -> np.ndarray:
        """Penultimate activations with dropout disabled; rows depend only on their frame."""
        _, tap, _ = self.forward(x, train=False)
        return tap

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Task prediction in label units (progress, RSD minutes or class index)."""
        out, _, _ = self.forward(x, train=False)
        if self.task.is_classification:
            return out.argmax(axis=1)
        if self.task.kind == "progress_regression":
            return sigmoid(out[:, 0])
        return out[:, 0] * self.s_norm

    def loss(self, x: np.ndarray, targets: np.ndarray) -> float:
        out, _, _ = self.forward(x, train=False)
        return self._head_loss(out, targets)[0]

    def _head_loss(self, out: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
        n = out.shape[0]
        if self.task.is_classification:
            loss, dout = cross_entropy(out, targets)
            return loss, dout.astype(self.dtype)
        if self.task.kind == "progress_regression":
            pred = sigmoid(out[:, 0])
            loss, grad = smooth_l1(pred, targets)
            dout = (grad * pred * (1 - pred) / n)[:, None]
        else:
            loss, grad = smooth_l1(out[:, 0], targets)
            dout = (grad / n)[:, None]
        return float(loss.mean()), dout.astype(self.dtype)

    def loss_and_grads(
        self, x: np.ndarray, targets: np.ndarray, rng: Optional[np.random.Generator] = None
    ) -> float:
        """Mean task loss over the batch; fills Tensor.grad for every parameter."""
        out, _, caches = self.forward(x, train=rng is not None, rng=rng)
        loss, dout = self._head_loss(out, targets)
        da, dW, db = linear_backward(dout, caches[-1])
        self.params["head.W"].grad = dW
        self.params["head.b"].grad = db
        for i in range(len(self.hidden_sizes) - 1, -1, -1):
            lin_cache, z, mask = caches[i]
            if mask is not None:
                da = da * mask
            da, dW, db = linear_backward(relu_backward(da, z), lin_cache)
            self.params[f"hidden{i}.W"].grad = dW
            self.params[f"hidden{i}.b"].grad = db
        return loss

    def to_checkpoint(self, metadata: Optional[Dict[str, Any]] = None) -> ModelCheckpoint:
        meta = {
            "task": self.task.to_dict(),
            "input_dim": self.input_dim,
            "hidden_sizes": list(self.hidden_sizes),
            "dropout_p": self.dropout_p,
            "s_norm": self.s_norm,
            "precision": "f64" if self.dtype == np.float64 else "f32",
        }
        meta.update(metadata or {})
        tensors = {name: p.data.copy() for name, p in self.params.items()}
        return ModelCheckpoint(kind="encoder", tensors=tensors, metadata=meta)

    @classmethod
    def from_checkpoint(cls, checkpoint: ModelCheckpoint) -> "EncoderNet":
        if checkpoint.kind != "encoder":
            raise CheckpointError(f"expected an encoder checkpoint, got {checkpoint.kind}")
        meta = checkpoint.metadata
        net = cls(
            task=EncoderTask.from_dict(meta["task"]),
            input_dim=int(meta["input_dim"]),
            hidden_sizes=meta["hidden_sizes"],
            dropout_p=float(meta["dropout_p"]),
            s_norm=float(meta["s_norm"]),
            dtype=resolve_dtype(meta.get("precision", "f32")),
        )
        for name, param in net.params.items():
            if name not in checkpoint.tensors or checkpoint.tensors[name].shape != param.shape:
                raise CheckpointError(f"checkpoint tensor {name} missing or mis-shaped")
            param.data = checkpoint.tensors[name].astype(net.dtype, copy=True)
        return net


@dataclass(frozen=True)
class EncoderTrainConfig:
    sgd: SgdConfig
    iterations: int = 5000
    batch_size: int = 48
    eval_every: int = 250
    hidden_sizes: Tuple[int, ...] = (64, 64)
    dropout_p: float = 0.1
    s_norm: float = 1.0
    clip_norm: float = 5.0
    seed: int = 0
    precision: str = "f32"
    max_eval_frames: int = 20000

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("encoder: iterations, batch_size and eval_every must be >= 1")


def _stack_frames(
    sequences: Sequence[FrameSequence], task: EncoderTask, s_norm: float
) -> Tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([seq.features for seq in sequences])
    y = np.concatenate([label_for_task(task, seq.labels, s_norm) for seq in sequences])
    return x, y


def evaluate_encoder(
    net: EncoderNet, sequences: Sequence[FrameSequence], max_frames: Optional[int] = None
) -> Dict[str, float]:
    """Task loss plus MAE (regression, in label units) or accuracy (classification)."""
    x, targets = _stack_frames(sequences, net.task, net.s_norm)
    if max_frames is not None and len(x) > max_frames:
        keep = np.linspace(0, len(x) - 1, max_frames).astype(np.int64)
        x, targets = x[keep], targets[keep]
    metrics = {"loss": net.loss(x, targets), "n_frames": int(len(x))}
    prediction = net.predict(x)
    if net.task.is_classification:
        metrics["accuracy"] = float(np.mean(prediction == targets))
    elif net.task.kind == "rsd_regression":
        metrics["mae"] = float(np.mean(np.abs(prediction - targets * net.s_norm)))
    else:
        metrics["mae"] = float(np.mean(np.abs(prediction - targets)))
    return metrics


def train_encoder(
    dataset: Dataset,
    split: DatasetSplit,
    task: EncoderTask,
    cfg: EncoderTrainConfig,
    metadata: Optional[Dict[str, Any]] = None,
) -> ModelCheckpoint:
    """Train on random 48-frame minibatches from T1; keep the best-on-V parameters."""
    by_id = index_dataset(dataset)
    if not split.t1_ids:
        raise SplitError("encoder training needs a non-empty T1 subset")
    if not split.v_ids:
        raise SplitError("encoder training needs a non-empty V subset")
    train_seqs = [by_id[sid][1] for sid in split.t1_ids]
    val_seqs = [by_id[sid][1] for sid in split.v_ids]
    dtype = resolve_dtype(cfg.precision)
    x_train, y_train = _stack_frames(train_seqs, task, cfg.s_norm)
    x_train = x_train.astype(dtype)

    net = EncoderNet(
        task,
        input_dim=x_train.shape[1],
        hidden_sizes=cfg.hidden_sizes,
        dropout_p=cfg.dropout_p,
        s_norm=cfg.s_norm,
        seed=cfg.seed,
        dtype=dtype,
    )
    rng = np.random.default_rng([cfg.seed, 1])
    state: Dict[str, np.ndarray] = {}
    best = {"val_loss": float("inf"), "iteration": 0, "metrics": {}, "params": None}
    log = []
    running = []
    lr = cfg.sgd.lr0
    logging.info(
        f"Training encoder ({task.slug}) on {len(train_seqs)} surgeries / {len(x_train)} frames "
        f"for {cfg.iterations} iterations"
    )
    for iteration in range(cfg.iterations):
        batch = rng.integers(0, len(x_train), size=cfg.batch_size)
        loss = net.loss_and_grads(x_train[batch], y_train[batch], rng)
        if not np.isfinite(loss):
            raise NumericError(f"Non-finite encoder loss at iteration {iteration} ({task.slug})")
        clip_grad_norm(net.params, cfg.clip_norm)
        lr = sgd_step(net.params, state, cfg.sgd, iteration)
        running.append(loss)
        if (iteration + 1) % cfg.eval_every == 0 or iteration + 1 == cfg.iterations:
            metrics = evaluate_encoder(net, val_seqs, cfg.max_eval_frames)
            train_loss = float(np.mean(running))
            running = []
            log.append({"iteration": iteration + 1, "lr": lr, "train_loss": train_loss, **metrics})
            logging.info(
                f"encoder {task.slug} iter {iteration + 1}: lr {lr:.2e} train loss "
                f"{train_loss:.4f} V loss {metrics['loss']:.4f}"
            )
            if metrics["loss"] < best["val_loss"]:
                best = {
                    "val_loss": metrics["loss"],
                    "iteration": iteration + 1,
                    "metrics": metrics,
                    "params": {name: p.data.copy() for name, p in net.params.items()},
                }
    for name, data in best["params"].items():
        net.params[name].data = data
    meta = {
        "iteration": best["iteration"],
        "lr": lr,
        "seed": cfg.seed,
        "fold_index": split.fold_index,
        "t1_size": len(split.t1_ids),
        "val_metrics": best["metrics"],
        "train_target_mean": float(np.mean(y_train)) if not task.is_classification else None,
        "log": log,
    }
    meta.update(metadata or {})
    logging.info(
        f"encoder {task.slug}: best V loss {best['val_loss']:.4f} at iteration {best['iteration']}"
    )
    return net.to_checkpoint(meta)


def mean_predictor_mae(checkpoint: ModelCheckpoint, sequences: Sequence[FrameSequence]) -> float:
    """V MAE (label units) of always predicting the training-set mean target."""
    meta = checkpoint.metadata
    task = EncoderTask.from_dict(meta["task"])
    if task.is_classification:
        raise ConfigError("mean predictor is only defined for regression tasks")
    s_norm = float(meta["s_norm"])
    _, targets = _stack_frames(sequences, task, s_norm)
    scale = s_norm if task.kind == "rsd_regression" else 1.0
    return float(np.mean(np.abs(targets - meta["train_target_mean"]))) * scale


def extract_features(net: EncoderNet, sequence: FrameSequence) -> np.ndarray:
    """Frame-wise penultimate features (total_frames x penultimate_dim), dropout off."""
    if sequence.features.shape[1] != net.input_dim:
        raise CheckpointError(
            f"{sequence.surgery_id}: {sequence.features.shape[1]}-dim frames, encoder expects "
            f"{net.input_dim}"
        )
    return net.features(sequence.features).astype(np.float32)


def extract_all(
    net: EncoderNet, sequences: Sequence[FrameSequence], threads: Optional[int] = None
) -> Dict[str, np.ndarray]:
    feats = parallel_map(lambda seq: extract_features(net, seq), sequences, threads)
    for seq, f in zip(sequences, feats):
        if not np.all(np.isfinite(f)):
            raise NumericError(f"non-finite encoder features for {seq.surgery_id}")
    return {seq.surgery_id: f for seq, f in zip(sequences, feats)}
