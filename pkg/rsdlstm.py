"""
Rsdlstm - stage two: sequence models over frozen encoder features.

RSDNet runs a single-layer LSTM over a whole surgery, concatenates the
elapsed time (minutes) to every hidden state and regresses normalized RSD and
progress with two one-node heads. The single-task and TimeLSTM-style variants
drop the progress head. Training is full-sequence BPTT, one surgery per
iteration.
"""
import json
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from encoder import EncoderTask
from numkernel import (
    LstmCellParams,
    SgdConfig,
    Tensor,
    clip_grad_norm,
    dropout,
    init_uniform,
    lstm_sequence_backward,
    lstm_sequence_forward,
    resolve_dtype,
    sgd_step,
    sigmoid,
    smooth_l1,
)
from rsdcommon import (
    CheckpointError,
    ConfigError,
    DimensionError,
    InputError,
    NumericError,
    PipelineOrderError,
    SplitError,
    parallel_map,
)
from rsdio import ModelCheckpoint, atomic_write_bytes
from synthsurg import Dataset, DatasetSplit, FrameSequence, index_dataset

VARIANT_KINDS = ("rsdnet_multitask", "single_task_rsd", "timelstm_phase_encoder")
VARIANT_ALIASES = {
    "rsdnet": "rsdnet_multitask",
    "single": "single_task_rsd",
    "timelstm": "timelstm_phase_encoder",
}


@dataclass(frozen=True)
class VariantConfig:
    kind: str
    encoder_task: EncoderTask

    def __post_init__(self) -> None:
        if self.kind not in VARIANT_KINDS:
            raise ConfigError(f"Unknown LSTM variant '{self.kind}'. Available: {list(VARIANT_KINDS)}")
        if self.kind == "timelstm_phase_encoder" and self.encoder_task.kind != "phase_classification":
            raise ConfigError("timelstm_phase_encoder consumes a phase_classification encoder")

    @classmethod
    def create(
        cls, kind: str, n_phases: int = 7, encoder_task: Optional[EncoderTask] = None
    ) -> "VariantConfig":
        """Variant with its default encoder task; `encoder_task` swaps the stage-1 formulation."""
        kind = VARIANT_ALIASES.get(kind, kind)
        if encoder_task is None:
            if kind == "timelstm_phase_encoder":
                encoder_task = EncoderTask("phase_classification", n_classes=n_phases)
            else:
                encoder_task = EncoderTask.create("progress_regression")
        return cls(kind=kind, encoder_task=encoder_task)

    @property
    def multitask(self) -> bool:
        return self.kind == "rsdnet_multitask"


def normalize_rsd(rsd_min, s_norm: float):
    if s_norm <= 0:
        raise ConfigError(f"s_norm must be > 0, got {s_norm}")
    return np.asarray(rsd_min) / s_norm


def denormalize(output, s_norm: float):
    """Head output back to minutes, clamped at zero."""
    if s_norm <= 0:
        raise ConfigError(f"s_norm must be > 0, got {s_norm}")
    return np.maximum(np.asarray(output) * s_norm, 0)


@dataclass(frozen=True)
class PredictionTrace:
    surgery_id: str
    rsd_pred: np.ndarray
    rsd_true: np.ndarray
    elapsed_min: np.ndarray
    prog_pred: Optional[np.ndarray] = None

    @property
    def total_frames(self) -> int:
        return len(self.rsd_true)

    @property
    def total_duration(self) -> float:
        return float(self.elapsed_min[-1] + self.rsd_true[-1])

    @property
    def frame_period_min(self) -> float:
        return float(self.elapsed_min[0])


@dataclass
class SequenceOutput:
    rsd_head: np.ndarray
    prog_pred: Optional[np.ndarray]
    cells: np.ndarray
    cache: Any


class RsdNet:
    """LSTM -> [h_t ; elapsed_t] -> RSD head (and sigmoid progress head when multitask)."""

    def __init__(
        self,
        input_dim: int,
        hidden_size: int = 64,
        multitask: bool = True,
        s_norm: float = 5.0,
        dropout_p: float = 0.3,
        forget_bias: float = 1.0,
        seed: int = 0,
        dtype=np.float32,
    ):
        if s_norm <= 0:
            raise ConfigError(f"s_norm must be > 0, got {s_norm}")
        self.input_dim = input_dim
        self.hidden_size = hidden_size
        self.multitask = multitask
        self.s_norm = s_norm
        self.dropout_p = dropout_p
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        lstm = LstmCellParams.initialize(rng, input_dim, hidden_size, dtype, forget_bias)
        H1 = hidden_size + 1
        self.params: Dict[str, Tensor] = {
            "lstm.W": Tensor("lstm.W", lstm.W),
            "lstm.U": Tensor("lstm.U", lstm.U),
            "lstm.b": Tensor("lstm.b", lstm.b),
            "head_rsd.W": Tensor("head_rsd.W", init_uniform(rng, (H1, 1), H1, dtype)),
            "head_rsd.b": Tensor("head_rsd.b", np.zeros(1, dtype=dtype)),
        }
        if multitask:
            self.params["head_prog.W"] = Tensor("head_prog.W", init_uniform(rng, (H1, 1), H1, dtype))
            self.params["head_prog.b"] = Tensor("head_prog.b", np.zeros(1, dtype=dtype))

    @property
    def lstm(self) -> LstmCellParams:
        return LstmCellParams(
            self.params["lstm.W"].data, self.params["lstm.U"].data, self.params["lstm.b"].data
        )

    def _p(self, name: str) -> np.ndarray:
        return self.params[name].data

    def to_checkpoint(self, metadata: Optional[Dict[str, Any]] = None) -> ModelCheckpoint:
        meta = {
            "input_dim": self.input_dim,
            "hidden_size": self.hidden_size,
            "multitask": self.multitask,
            "s_norm": self.s_norm,
            "dropout_p": self.dropout_p,
            "precision": "f64" if self.dtype == np.float64 else "f32",
        }
        meta.update(metadata or {})
        tensors = {name: p.data.copy() for name, p in self.params.items()}
        return ModelCheckpoint(kind="rsdlstm", tensors=tensors, metadata=meta)

    @classmethod
    def from_checkpoint(cls, checkpoint: ModelCheckpoint) -> "RsdNet":
        if checkpoint.kind != "rsdlstm":
            raise CheckpointError(f"expected an rsdlstm checkpoint, got {checkpoint.kind}")
        meta = checkpoint.metadata
        model = cls(
            input_dim=int(meta["input_dim"]),
            hidden_size=int(meta["hidden_size"]),
            multitask=bool(meta["multitask"]),
            s_norm=float(meta["s_norm"]),
            dropout_p=float(meta["dropout_p"]),
            dtype=resolve_dtype(meta.get("precision", "f32")),
        )
        for name, param in model.params.items():
            if name not in checkpoint.tensors or checkpoint.tensors[name].shape != param.shape:
                raise CheckpointError(f"checkpoint tensor {name} missing or mis-shaped")
            param.data = checkpoint.tensors[name].astype(model.dtype, copy=True)
        return model


def forward_sequence(
    model: RsdNet,
    features: np.ndarray,
    elapsed_min: np.ndarray,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> SequenceOutput:
    """Single causal left-to-right pass from h_0 = c_0 = 0."""
    if features.ndim != 2 or features.shape[1] != model.input_dim:
        raise DimensionError(
            f"model expects {model.input_dim}-dim features, got array of shape {features.shape}"
        )
    if len(elapsed_min) != len(features):
        raise DimensionError(f"{len(elapsed_min)} elapsed values for {len(features)} frames")
    if len(features) > 1 and not np.all(np.diff(elapsed_min) > 0):
        raise InputError("elapsed time must be strictly increasing")
    dt = model.dtype
    x, mask_x = dropout(features.astype(dt, copy=False), model.dropout_p, train, rng)
    hs, cs, lstm_cache = lstm_sequence_forward(model.lstm, x)
    h_out, mask_h = dropout(hs, model.dropout_p, train, rng)
    A = np.concatenate([h_out, np.asarray(elapsed_min, dtype=dt)[:, None]], axis=1)
    rsd_head = (A @ model._p("head_rsd.W") + model._p("head_rsd.b"))[:, 0]
    prog_pred = None
    if model.multitask:
        prog_pred = sigmoid((A @ model._p("head_prog.W") + model._p("head_prog.b"))[:, 0])
    return SequenceOutput(rsd_head, prog_pred, cs, (A, mask_h, lstm_cache))


def loss_multitask(
    output: SequenceOutput, rsd_true: np.ndarray, prog_true: np.ndarray, s_norm: float
) -> Tuple[float, np.ndarray, Optional[np.ndarray]]:
    """Per-frame mean of smoothL1(RSD) + smoothL1(progress), equal weights.

    Returns (loss, dL/d rsd_head, dL/d prog_pred); without a progress head the
    progress term is absent.
    """
    n = len(rsd_true)
    rsd_loss, rsd_grad = smooth_l1(output.rsd_head, normalize_rsd(rsd_true, s_norm))
    loss = float(rsd_loss.sum()) / n
    d_rsd = rsd_grad / n
    d_prog = None
    if output.prog_pred is not None:
        prog_loss, prog_grad = smooth_l1(output.prog_pred, prog_true)
        loss += float(prog_loss.sum()) / n
        d_prog = prog_grad / n
    return loss, d_rsd, d_prog


def backward_sequence(
    model: RsdNet, output: SequenceOutput, d_rsd: np.ndarray, d_prog: Optional[np.ndarray]
) -> None:
    """Fill Tensor.grad for every parameter from the head-output gradients."""
    A, mask_h, lstm_cache = output.cache
    dt = model.dtype
    d_rsd = np.asarray(d_rsd, dtype=dt)[:, None]
    grads = {
        "head_rsd.W": A.T @ d_rsd,
        "head_rsd.b": d_rsd.sum(axis=0),
    }
    dA = d_rsd @ model._p("head_rsd.W").T
    if model.multitask:
        p = output.prog_pred
        d_logit = (np.asarray(d_prog, dtype=dt) * p * (1 - p))[:, None]
        grads["head_prog.W"] = A.T @ d_logit
        grads["head_prog.b"] = d_logit.sum(axis=0)
        dA = dA + d_logit @ model._p("head_prog.W").T
    dh = dA[:, : model.hidden_size]
    if mask_h is not None:
        dh = dh * mask_h
    _, lstm_grads = lstm_sequence_backward(model.lstm, dh, lstm_cache)
    for key, grad in lstm_grads.items():
        grads[f"lstm.{key}"] = grad
    for name, param in model.params.items():
        param.grad = grads[name]


def predict_trace(model: RsdNet, sequence: FrameSequence, features: np.ndarray) -> PredictionTrace:
    output = forward_sequence(model, features, sequence.elapsed_min, train=False)
    return PredictionTrace(
        surgery_id=sequence.surgery_id,
        rsd_pred=denormalize(output.rsd_head.astype(np.float64), model.s_norm),
        rsd_true=sequence.rsd_min,
        elapsed_min=sequence.elapsed_min,
        prog_pred=None if output.prog_pred is None else output.prog_pred.astype(np.float64),
    )


def predict_traces(
    model: RsdNet,
    dataset: Dataset,
    features: Dict[str, np.ndarray],
    surgery_ids: Sequence[str],
    threads: Optional[int] = None,
) -> List[PredictionTrace]:
    by_id = index_dataset(dataset)
    missing = [sid for sid in surgery_ids if sid not in features]
    if missing:
        raise PipelineOrderError(
            f"features missing for {len(missing)} surgeries (e.g. {missing[0]}); "
            "run `encoder extract` first"
        )
    return parallel_map(
        lambda sid: predict_trace(model, by_id[sid][1], features[sid]), surgery_ids, threads
    )


def trace_mae(trace: PredictionTrace) -> float:
    return float(np.mean(np.abs(trace.rsd_pred - trace.rsd_true)))


@dataclass(frozen=True)
class LstmTrainConfig:
    sgd: SgdConfig
    iterations: int = 3000
    eval_every: int = 100
    hidden_size: int = 64
    dropout_p: float = 0.3
    s_norm: float = 5.0
    clip_norm: float = 5.0
    forget_bias: float = 1.0
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.eval_every < 1 or self.hidden_size < 1:
            raise ConfigError("lstm: iterations, eval_every and hidden_size must be >= 1")
        if self.s_norm <= 0:
            raise ConfigError(f"s_norm must be > 0, got {self.s_norm}")


def train_variant(
    variant: VariantConfig,
    split: DatasetSplit,
    dataset: Dataset,
    features: Dict[str, np.ndarray],
    cfg: LstmTrainConfig,
    metadata: Optional[Dict[str, Any]] = None,
) -> ModelCheckpoint:
    """One complete T1 ∪ T2 surgery per iteration; keep the best V RSD MAE parameters."""
    train_ids = list(split.train_ids)
    if not train_ids or not split.v_ids:
        raise SplitError("LSTM training needs non-empty T1 ∪ T2 and V subsets")
    missing = [sid for sid in train_ids + list(split.v_ids) if sid not in features]
    if missing:
        raise PipelineOrderError(
            f"features missing for {len(missing)} surgeries (e.g. {missing[0]}); "
            "run `encoder extract` first"
        )
    by_id = index_dataset(dataset)
    input_dim = features[train_ids[0]].shape[1]
    model = RsdNet(
        input_dim=input_dim,
        hidden_size=cfg.hidden_size,
        multitask=variant.multitask,
        s_norm=cfg.s_norm,
        dropout_p=cfg.dropout_p,
        forget_bias=cfg.forget_bias,
        seed=cfg.seed,
        dtype=resolve_dtype(cfg.precision),
    )
    rng = np.random.default_rng([cfg.seed, 2])
    state: Dict[str, np.ndarray] = {}
    best = {"val_mae": float("inf"), "iteration": 0, "params": None}
    log = []
    running = []
    lr = cfg.sgd.lr0
    logging.info(
        f"Training {variant.kind} on {len(train_ids)} surgeries for {cfg.iterations} iterations "
        f"(s_norm {cfg.s_norm}, hidden {cfg.hidden_size})"
    )
    for iteration in range(cfg.iterations):
        sid = train_ids[int(rng.integers(len(train_ids)))]
        seq = by_id[sid][1]
        output = forward_sequence(model, features[sid], seq.elapsed_min, train=True, rng=rng)
        loss, d_rsd, d_prog = loss_multitask(output, seq.rsd_min, seq.progress, cfg.s_norm)
        if not np.isfinite(loss):
            raise NumericError(f"Non-finite loss at iteration {iteration} on surgery {sid}")
        backward_sequence(model, output, d_rsd, d_prog)
        clip_grad_norm(model.params, cfg.clip_norm)
        lr = sgd_step(model.params, state, cfg.sgd, iteration)
        running.append(loss)
        if (iteration + 1) % cfg.eval_every == 0 or iteration + 1 == cfg.iterations:
            val_traces = [predict_trace(model, by_id[v][1], features[v]) for v in split.v_ids]
            val_mae = float(np.mean([trace_mae(t) for t in val_traces]))
            train_loss = float(np.mean(running))
            running = []
            log.append({"iteration": iteration + 1, "lr": lr, "train_loss": train_loss, "val_mae": val_mae})
            logging.info(
                f"{variant.kind} iter {iteration + 1}: lr {lr:.2e} train loss {train_loss:.4f} "
                f"V RSD MAE {val_mae:.3f} min"
            )
            if val_mae < best["val_mae"]:
                best = {
                    "val_mae": val_mae,
                    "iteration": iteration + 1,
                    "params": {name: p.data.copy() for name, p in model.params.items()},
                }
    for name, data in best["params"].items():
        model.params[name].data = data
    meta = {
        "variant": variant.kind,
        "encoder_task": variant.encoder_task.to_dict(),
        "iteration": best["iteration"],
        "lr": lr,
        "seed": cfg.seed,
        "fold_index": split.fold_index,
        "val_mae": best["val_mae"],
        "log": log,
    }
    meta.update(metadata or {})
    logging.info(f"{variant.kind}: best V RSD MAE {best['val_mae']:.3f} at iteration {best['iteration']}")
    return model.to_checkpoint(meta)


# --- traces ----------------------------------------------------------------


def write_traces(
    path: str, traces: Sequence[PredictionTrace], metadata: Optional[Dict[str, Any]] = None
) -> None:
    """JSONL, one object per frame: surgery_id, t, elapsed_min, rsd_true, rsd_pred[, prog_pred].

    An optional first line {"metadata": {...}} records provenance.
    """
    lines = [json.dumps({"metadata": metadata}, sort_keys=True)] if metadata else []
    for trace in traces:
        for t in range(trace.total_frames):
            row = {
                "surgery_id": trace.surgery_id,
                "t": t,
                "elapsed_min": float(trace.elapsed_min[t]),
                "rsd_true": float(trace.rsd_true[t]),
                "rsd_pred": float(trace.rsd_pred[t]),
            }
            if trace.prog_pred is not None:
                row["prog_pred"] = float(trace.prog_pred[t])
            lines.append(json.dumps(row))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
    logging.info(f"Wrote {len(traces)} traces to {path}")


def read_traces(path: str) -> List[PredictionTrace]:
    rows: Dict[str, List[Dict[str, Any]]] = {}
    try:
        with open(path, "r") as f:
            for line in f:
                if line.strip():
                    row = json.loads(line)
                    if "metadata" in row:
                        continue
                    rows.setdefault(row["surgery_id"], []).append(row)
    except FileNotFoundError:
        raise PipelineOrderError(f"trace file {path} not found; run the predicting stage first")
    traces = []
    for sid, frames in rows.items():
        frames.sort(key=lambda r: r["t"])
        has_prog = "prog_pred" in frames[0]
        traces.append(
            PredictionTrace(
                surgery_id=sid,
                rsd_pred=np.array([r["rsd_pred"] for r in frames]),
                rsd_true=np.array([r["rsd_true"] for r in frames]),
                elapsed_min=np.array([r["elapsed_min"] for r in frames]),
                prog_pred=np.array([r["prog_pred"] for r in frames]) if has_prog else None,
            )
        )
    return traces


# --- interpretation --------------------------------------------------------


def dump_cell_activations(
    model: RsdNet, sequence: FrameSequence, features: np.ndarray
) -> pd.DataFrame:
    """Per-frame cell states c_t with the predictions: columns t, c_1..c_H, rsd_pred, prog_pred."""
    output = forward_sequence(model, features, sequence.elapsed_min, train=False)
    table = pd.DataFrame(
        output.cells.astype(np.float64),
        columns=[f"c_{i + 1}" for i in range(model.hidden_size)],
    )
    table.insert(0, "t", np.arange(sequence.total_frames))
    table["rsd_pred"] = denormalize(output.rsd_head.astype(np.float64), model.s_norm)
    table["prog_pred"] = (
        output.prog_pred.astype(np.float64) if output.prog_pred is not None else np.nan
    )
    return table


def write_cells(path: str, cells: pd.DataFrame) -> None:
    if path.endswith(".jsonl"):
        payload = cells.to_json(orient="records", lines=True)
    else:
        payload = cells.to_csv(index=False)
    atomic_write_bytes(path, payload.encode("utf-8"))
    logging.info(f"Wrote {len(cells)} rows of cell activations to {path}")


def cell_statistics(cells: pd.DataFrame, cue_mask: np.ndarray) -> pd.DataFrame:
    """Per cell: Spearman correlation with time and terminal-cue separation in pooled-std units."""
    cue_mask = np.asarray(cue_mask, dtype=bool)
    rows = []
    for column in [c for c in cells.columns if c.startswith("c_")]:
        values = cells[column].to_numpy()
        if np.ptp(values) == 0:
            rho = 0.0
        else:
            rho = float(spearmanr(values, cells["t"].to_numpy()).correlation)
        separation = 0.0
        inside, outside = values[cue_mask], values[~cue_mask]
        if len(inside) > 1 and len(outside) > 1:
            pooled = np.sqrt(
                ((len(inside) - 1) * inside.var(ddof=1) + (len(outside) - 1) * outside.var(ddof=1))
                / (len(inside) + len(outside) - 2)
            )
            if pooled > 0:
                separation = float(abs(inside.mean() - outside.mean()) / pooled)
        rows.append({"cell": column, "spearman_t": rho, "cue_separation": separation})
    return pd.DataFrame(rows)
