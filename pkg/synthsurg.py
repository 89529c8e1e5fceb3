"""
Synthsurg - deterministic generator of synthetic surgeries.

Each surgery is a linear walk through the workflow's phases (some optional
phases may be skipped) with log-normal phase durations scaled by a
per-surgery style multiplier. Every frame gets a feature vector made of a
phase one-hot, sampled tool-presence channels, a terminal cue channel that is
only active in the end-signal phase, pure-noise padding and Gaussian noise.
Labels (progress, RSD, elapsed time) are derived from the frame count alone.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from rsdcommon import ConfigError, FormatError, SplitError, parallel_map
from rsdio import DATASET_MAGIC, read_container, write_container

N_TOOLS = 8
QUARTILE_TOLERANCE = 0.15


@dataclass(frozen=True)
class WorkflowSpec:
    """Generator parameters; durations in seconds, probabilities per phase."""

    n_phases: int = 7
    phase_duration_params: Tuple[Tuple[float, float], ...] = ()
    skip_probs: Tuple[float, ...] = ()
    tool_channels: Tuple[Tuple[float, ...], ...] = ()
    end_signal_phase: int = 4
    feature_dim: int = 32
    noise_sigma: float = 0.3
    style_sigma: float = 0.35
    frame_period_s: float = 1.0
    time_scale: float = 1.0
    phase_names: Tuple[str, ...] = ()

    @property
    def n_tools(self) -> int:
        return len(self.tool_channels[0]) if self.tool_channels else 0

    @property
    def cue_channel(self) -> int:
        return self.n_phases + self.n_tools

    def validate(self) -> None:
        """Raise ConfigError naming the first violated invariant."""
        if self.n_phases < 2:
            raise ConfigError(f"WorkflowSpec: n_phases >= 2 violated ({self.n_phases})")
        if len(self.phase_duration_params) != self.n_phases:
            raise ConfigError(
                "WorkflowSpec: one (mu, sigma) pair per phase required, got "
                f"{len(self.phase_duration_params)} for {self.n_phases} phases"
            )
        if any(sigma < 0 for _, sigma in self.phase_duration_params):
            raise ConfigError("WorkflowSpec: phase duration sigma >= 0 violated")
        if self.noise_sigma < 0 or self.style_sigma < 0:
            raise ConfigError("WorkflowSpec: noise_sigma >= 0 and style_sigma >= 0 violated")
        if len(self.skip_probs) != self.n_phases:
            raise ConfigError("WorkflowSpec: one skip probability per phase required")
        if any(not 0 <= p < 1 for p in self.skip_probs):
            raise ConfigError("WorkflowSpec: 0 <= skip_probs < 1 violated")
        if self.skip_probs[0] != 0 or self.skip_probs[-1] != 0:
            raise ConfigError("WorkflowSpec: first and final phase can never be skipped")
        if len(self.tool_channels) != self.n_phases or len(
            {len(row) for row in self.tool_channels}
        ) != 1:
            raise ConfigError("WorkflowSpec: tool_channels must be n_phases rows of equal length")
        if any(not 0 <= p <= 1 for row in self.tool_channels for p in row):
            raise ConfigError("WorkflowSpec: tool activation probabilities must lie in [0, 1]")
        if not 0 <= self.end_signal_phase < self.n_phases:
            raise ConfigError(
                f"WorkflowSpec: end_signal_phase {self.end_signal_phase} outside 0..{self.n_phases - 1}"
            )
        if self.feature_dim < self.n_phases + self.n_tools + 1:
            raise ConfigError(
                f"WorkflowSpec: feature_dim >= n_phases + tool channels + 1 violated "
                f"({self.feature_dim} < {self.n_phases + self.n_tools + 1})"
            )
        if self.frame_period_s <= 0 or self.time_scale <= 0:
            raise ConfigError("WorkflowSpec: frame_period_s > 0 and time_scale > 0 violated")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "WorkflowSpec":
        return cls(
            n_phases=int(data["n_phases"]),
            phase_duration_params=tuple(tuple(p) for p in data["phase_duration_params"]),
            skip_probs=tuple(data["skip_probs"]),
            tool_channels=tuple(tuple(row) for row in data["tool_channels"]),
            end_signal_phase=int(data["end_signal_phase"]),
            feature_dim=int(data["feature_dim"]),
            noise_sigma=float(data["noise_sigma"]),
            style_sigma=float(data["style_sigma"]),
            frame_period_s=float(data["frame_period_s"]),
            time_scale=float(data.get("time_scale", 1.0)),
            phase_names=tuple(data.get("phase_names", ())),
        )


def build_workflow_spec(preset: Dict[str, Any], time_scale: float = 1.0) -> WorkflowSpec:
    """Turn a preset from presets.json into a WorkflowSpec.

    Per-phase log-normal mu values are solved so that the expected total
    duration, given the skip probabilities and a mean-one style multiplier,
    equals the preset's target mean.
    """
    weights = np.asarray(preset["phase_weights"], dtype=float)
    sigmas = np.asarray(preset["phase_sigmas"], dtype=float)
    skips = np.asarray(preset["skip_probs"], dtype=float)
    expected_weight = float(np.sum((1 - skips) * weights))
    if expected_weight <= 0:
        raise ConfigError("preset: phase weights must have a positive expected sum")
    scale_min = preset["target_mean_min"] / expected_weight
    mean_s = weights * scale_min * 60.0
    params = tuple(
        (float(math.log(m) - s * s / 2), float(s)) for m, s in zip(mean_s, sigmas)
    )
    spec = WorkflowSpec(
        n_phases=len(weights),
        phase_duration_params=params,
        skip_probs=tuple(float(p) for p in skips),
        tool_channels=tuple(tuple(float(p) for p in row) for row in preset["tool_probs"]),
        end_signal_phase=int(preset["end_signal_phase"]),
        feature_dim=int(preset.get("feature_dim", 32)),
        noise_sigma=float(preset.get("noise_sigma", 0.3)),
        style_sigma=float(preset.get("style_sigma", 0.35)),
        frame_period_s=float(preset.get("frame_period_s", 1.0)),
        time_scale=float(time_scale),
        phase_names=tuple(preset.get("phase_names", ())),
    )
    spec.validate()
    return spec


@dataclass(frozen=True)
class Segment:
    phase_id: int
    start_frame: int
    end_frame: int  # exclusive


@dataclass(frozen=True)
class SurgeryRecord:
    surgery_id: str
    seed: int
    segments: Tuple[Segment, ...]
    total_frames: int
    total_duration_T: float  # minutes
    style: float
    frame_period_s: float = 1.0

    def phase_duration_min(self, phase_id: int) -> Optional[float]:
        """Duration of a phase in minutes, None when the phase was skipped."""
        for seg in self.segments:
            if seg.phase_id == phase_id:
                return (seg.end_frame - seg.start_frame) * self.frame_period_s / 60.0
        return None

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["segments"] = [[s.phase_id, s.start_frame, s.end_frame] for s in self.segments]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SurgeryRecord":
        return cls(
            surgery_id=data["surgery_id"],
            seed=int(data["seed"]),
            segments=tuple(Segment(*map(int, s)) for s in data["segments"]),
            total_frames=int(data["total_frames"]),
            total_duration_T=float(data["total_duration_T"]),
            style=float(data["style"]),
            frame_period_s=float(data["frame_period_s"]),
        )


@dataclass(frozen=True)
class FrameLabels:
    progress: np.ndarray
    rsd_min: np.ndarray
    elapsed_min: np.ndarray
    phase_id: np.ndarray


@dataclass(frozen=True)
class FrameSequence:
    surgery_id: str
    features: np.ndarray  # total_frames x feature_dim, float32
    progress: np.ndarray
    rsd_min: np.ndarray
    elapsed_min: np.ndarray
    phase_id: np.ndarray

    @property
    def total_frames(self) -> int:
        return len(self.progress)

    @property
    def labels(self) -> FrameLabels:
        return FrameLabels(self.progress, self.rsd_min, self.elapsed_min, self.phase_id)


Dataset = List[Tuple[SurgeryRecord, FrameSequence]]


def derive_labels(record: SurgeryRecord) -> FrameLabels:
    """Progress, RSD and elapsed minutes from frame counts; the last frame has progress 1."""
    n = record.total_frames
    frames_done = np.arange(1, n + 1)
    elapsed = frames_done * record.frame_period_s / 60.0
    T = n * record.frame_period_s / 60.0
    phase_id = np.empty(n, dtype=np.int64)
    for seg in record.segments:
        phase_id[seg.start_frame : seg.end_frame] = seg.phase_id
    return FrameLabels(
        progress=frames_done / n,
        rsd_min=T - elapsed,
        elapsed_min=elapsed,
        phase_id=phase_id,
    )


def _sample_segments(
    spec: WorkflowSpec, rng: np.random.Generator
) -> Tuple[Tuple[Segment, ...], float]:
    # draw order is fixed (style, then skip/duration per phase) so streams stay stable
    style = math.exp(spec.style_sigma * rng.standard_normal() - spec.style_sigma**2 / 2)
    segments = []
    cursor = 0
    for p, (mu, sigma) in enumerate(spec.phase_duration_params):
        skip_draw = rng.random()
        duration_s = math.exp(mu + sigma * rng.standard_normal()) * style * spec.time_scale
        if skip_draw < spec.skip_probs[p]:
            continue
        frames = max(1, int(round(duration_s / spec.frame_period_s)))
        segments.append(Segment(p, cursor, cursor + frames))
        cursor += frames
    return tuple(segments), style


def _render_features(
    spec: WorkflowSpec, labels: FrameLabels, rng: np.random.Generator
) -> np.ndarray:
    n = len(labels.phase_id)
    features = np.zeros((n, spec.feature_dim), dtype=np.float64)
    features[np.arange(n), labels.phase_id] = 1.0
    tool_probs = np.asarray(spec.tool_channels, dtype=np.float64)[labels.phase_id]
    features[:, spec.n_phases : spec.cue_channel] = rng.random((n, spec.n_tools)) < tool_probs
    features[:, spec.cue_channel] = labels.phase_id == spec.end_signal_phase
    noise = rng.standard_normal((n, spec.feature_dim))
    # the cue stays exactly zero outside the end-signal phase
    noise[:, spec.cue_channel] = 0.0
    features += spec.noise_sigma * noise
    return features.astype(np.float32)


def generate_surgery(
    spec: WorkflowSpec, seed: int, index: int
) -> Tuple[SurgeryRecord, FrameSequence]:
    """Surgery number `index` of the stream rooted at `seed`."""
    rng = np.random.default_rng([seed, index])
    segments, style = _sample_segments(spec, rng)
    total_frames = segments[-1].end_frame
    record = SurgeryRecord(
        surgery_id=f"S{index:04d}",
        seed=seed,
        segments=segments,
        total_frames=total_frames,
        total_duration_T=total_frames * spec.frame_period_s / 60.0,
        style=style,
        frame_period_s=spec.frame_period_s,
    )
    labels = derive_labels(record)
    sequence = FrameSequence(
        surgery_id=record.surgery_id,
        features=_render_features(spec, labels, rng),
        progress=labels.progress,
        rsd_min=labels.rsd_min,
        elapsed_min=labels.elapsed_min,
        phase_id=labels.phase_id,
    )
    return record, sequence


def generate_dataset(
    spec: WorkflowSpec, n_surgeries: int, seed: int, threads: Optional[int] = None
) -> Dataset:
    """n_surgeries surgeries, one RNG stream per surgery derived from the master seed."""
    spec.validate()
    if n_surgeries < 1:
        raise ConfigError(f"n_surgeries must be >= 1, got {n_surgeries}")
    dataset = parallel_map(lambda i: generate_surgery(spec, seed, i), range(n_surgeries), threads)
    summary = dataset_summary(dataset)
    logging.info(
        f"Generated {n_surgeries} surgeries (seed {seed}): mean {summary['mean']:.1f} min, "
        f"median {summary['median']:.1f}, Q1 {summary['q1']:.1f}, Q3 {summary['q3']:.1f}"
    )
    return dataset


def dataset_summary(dataset: Dataset) -> Dict[str, float]:
    durations = np.array([rec.total_duration_T for rec, _ in dataset])
    q1, median, q3 = np.percentile(durations, [25, 50, 75])
    return {
        "n": int(len(durations)),
        "mean": float(durations.mean()),
        "std": float(durations.std()),
        "median": float(median),
        "q1": float(q1),
        "q3": float(q3),
    }


def index_dataset(dataset: Dataset) -> Dict[str, Tuple[SurgeryRecord, FrameSequence]]:
    return {rec.surgery_id: (rec, seq) for rec, seq in dataset}


# --- splits ----------------------------------------------------------------

SUBSETS = ("t1", "t2", "v", "e")


@dataclass(frozen=True)
class DatasetSplit:
    t1_ids: Tuple[str, ...]
    t2_ids: Tuple[str, ...]
    v_ids: Tuple[str, ...]
    e_ids: Tuple[str, ...]
    fold_index: int = 0

    @property
    def train_ids(self) -> Tuple[str, ...]:
        """Surgeries the LSTM stage and the reference statistics are trained on."""
        return self.t1_ids + self.t2_ids

    def subset(self, name: str) -> Tuple[str, ...]:
        return getattr(self, f"{name}_ids")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fold_index": self.fold_index,
            **{f"{name}_ids": list(self.subset(name)) for name in SUBSETS},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetSplit":
        return cls(
            fold_index=int(data["fold_index"]),
            **{f"{name}_ids": tuple(data[f"{name}_ids"]) for name in SUBSETS},
        )


def _apportion(n: int, ratios: Sequence[float]) -> List[int]:
    """Largest-remainder rounding of n * ratios to integers summing to n."""
    raw = [r * n for r in ratios]
    counts = [int(math.floor(x + 1e-9)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _spread_labels(
    n: int, counts: Sequence[int], offset: float, rng: np.random.Generator
) -> List[int]:
    """Subset label per duration rank; each subset's members sit at evenly spaced ranks."""
    entries = []
    for subset, count in enumerate(counts):
        for i in range(count):
            entries.append(((i + offset) * n / count, rng.random(), subset))
    entries.sort()
    return [subset for _, _, subset in entries]


def quartile_drift(split: DatasetSplit, dataset: Dataset) -> Dict[str, float]:
    """Largest relative deviation of each subset's Q1/Q3 from the full dataset's."""
    durations = {rec.surgery_id: rec.total_duration_T for rec, _ in dataset}
    q_all = np.percentile(list(durations.values()), [25, 75])
    drift = {}
    for name in SUBSETS:
        ids = split.subset(name)
        if not ids:
            continue
        q_sub = np.percentile([durations[sid] for sid in ids], [25, 75])
        drift[name] = float(np.max(np.abs(q_sub - q_all) / q_all))
    return drift


def make_splits(
    dataset: Dataset,
    ratios: Sequence[float],
    n_folds: int,
    seed: int,
    tolerance: float = QUARTILE_TOLERANCE,
    min_check_size: int = 10,
) -> List[DatasetSplit]:
    """Duration-stratified T1/T2/V/E splits for n_folds folds.

    Surgeries are ranked by duration and each subset takes evenly spaced
    ranks, which stratifies every subset across duration terciles (and
    finer). When n_folds * e_ratio == 1 the E-sets partition the dataset:
    every block of n_folds consecutive ranks sends one surgery to each fold.
    """
    if len(ratios) != 4 or abs(sum(ratios) - 1) > 1e-6 or any(r < 0 for r in ratios):
        raise ConfigError(f"split ratios must be four non-negative values summing to 1: {ratios}")
    if n_folds < 1:
        raise ConfigError(f"n_folds must be >= 1, got {n_folds}")
    ranked = [
        rec.surgery_id
        for rec, _ in sorted(dataset, key=lambda item: (item[0].total_duration_T, item[0].surgery_id))
    ]
    n = len(ranked)
    rng = np.random.default_rng(seed)
    partition = n_folds > 1 and abs(n_folds * ratios[3] - 1) < 1e-6
    if partition and n < n_folds:
        raise SplitError(f"too few surgeries ({n}) for {n_folds} folds")

    e_sets: List[List[str]] = []
    if partition:
        fold_of = {}
        for start in range(0, n, n_folds):
            block = ranked[start : start + n_folds]
            for sid, fold in zip(block, rng.permutation(n_folds)):
                fold_of[sid] = int(fold)
        e_sets = [[sid for sid in ranked if fold_of.get(sid) == k] for k in range(n_folds)]

    splits = []
    for k in range(n_folds):
        if partition:
            in_e = set(e_sets[k])
            rest = [sid for sid in ranked if sid not in in_e]
            train_ratios = [r / (1 - ratios[3]) for r in ratios[:3]]
            counts = _apportion(len(rest), train_ratios) + [0]
            labels = _spread_labels(len(rest), counts, 0.5, rng)
            members = {name: [] for name in SUBSETS}
            for sid, label in zip(rest, labels):
                members[SUBSETS[label]].append(sid)
            members["e"] = list(e_sets[k])
        else:
            counts = _apportion(n, ratios)
            labels = _spread_labels(n, counts, (k + 0.5) / n_folds, rng)
            members = {name: [] for name in SUBSETS}
            for sid, label in zip(ranked, labels):
                members[SUBSETS[label]].append(sid)
        for name, ratio in zip(SUBSETS, ratios):
            if ratio > 0 and not members[name]:
                raise SplitError(
                    f"too few surgeries ({n}) to populate subset {name.upper()} in fold {k}"
                )
        split = DatasetSplit(
            t1_ids=tuple(members["t1"]),
            t2_ids=tuple(members["t2"]),
            v_ids=tuple(members["v"]),
            e_ids=tuple(members["e"]),
            fold_index=k,
        )
        for name, drift in quartile_drift(split, dataset).items():
            if len(split.subset(name)) >= min_check_size and drift > tolerance:
                raise SplitError(
                    f"fold {k}: subset {name.upper()} quartiles drift {drift:.1%} from the dataset "
                    f"(tolerance {tolerance:.0%})"
                )
        logging.debug(
            f"Fold {k}: |T1|={len(split.t1_ids)} |T2|={len(split.t2_ids)} "
            f"|V|={len(split.v_ids)} |E|={len(split.e_ids)}"
        )
        splits.append(split)
    return splits


def extend_t1(split: DatasetSplit, size: int) -> DatasetSplit:
    """Grow T1 to `size` by moving evenly spaced T2 members into it (T1 ∪ T2 unchanged)."""
    extra = size - len(split.t1_ids)
    if extra <= 0:
        return split
    if extra > len(split.t2_ids):
        raise SplitError(
            f"cannot grow T1 to {size}: only {len(split.t1_ids) + len(split.t2_ids)} "
            "training surgeries available"
        )
    picks = {int((i + 0.5) * len(split.t2_ids) / extra) for i in range(extra)}
    moved = tuple(sid for i, sid in enumerate(split.t2_ids) if i in picks)
    kept = tuple(sid for i, sid in enumerate(split.t2_ids) if i not in picks)
    return DatasetSplit(
        t1_ids=split.t1_ids + moved,
        t2_ids=kept,
        v_ids=split.v_ids,
        e_ids=split.e_ids,
        fold_index=split.fold_index,
    )


# --- files -----------------------------------------------------------------


def _label_rows(labels: FrameLabels) -> np.ndarray:
    return np.stack(
        [labels.progress, labels.rsd_min, labels.elapsed_min, labels.phase_id.astype(np.float64)], axis=1
    ).astype(np.float32)


def _check_label_rows(
    path: str, record: SurgeryRecord, labels: FrameLabels, arrays: Dict[str, np.ndarray]
) -> None:
    features = arrays.get(f"{record.surgery_id}/features")
    stored = arrays.get(f"{record.surgery_id}/labels")
    if features is None or stored is None:
        raise FormatError(f"{path}: blobs for surgery {record.surgery_id} missing")
    if features.shape[0] != record.total_frames:
        raise FormatError(
            f"{path}: {record.surgery_id} has {features.shape[0]} feature rows for {record.total_frames} frames"
        )
    if not np.array_equal(stored, _label_rows(labels)):
        raise FormatError(f"{path}: stored labels of {record.surgery_id} disagree with its segments")


def write_dataset(
    path: str, spec: WorkflowSpec, dataset: Dataset, metadata: Optional[Dict[str, Any]] = None
) -> None:
    """RSDS file: spec echo and surgery index in the header, feature then label rows per surgery."""
    arrays = []
    for rec, seq in dataset:
        arrays.append((f"{rec.surgery_id}/features", seq.features))
        arrays.append((f"{rec.surgery_id}/labels", _label_rows(seq.labels)))
    header = {
        "kind": "dataset",
        "spec": spec.to_dict(),
        "surgeries": [rec.to_dict() for rec, _ in dataset],
        "metadata": metadata or {},
    }
    write_container(path, DATASET_MAGIC, header, arrays)
    logging.info(f"Wrote {len(dataset)} surgeries to {path}")


def read_dataset(path: str) -> Tuple[WorkflowSpec, Dataset, Dict[str, Any]]:
    """Load an RSDS file.

    Labels are re-derived exactly from the segment index; the stored f32 label
    rows must agree with them, otherwise the file is rejected.
    """
    header, arrays = read_container(path, DATASET_MAGIC)
    spec = WorkflowSpec.from_dict(header["spec"])
    dataset = []
    for rec_data in header["surgeries"]:
        record = SurgeryRecord.from_dict(rec_data)
        labels = derive_labels(record)
        _check_label_rows(path, record, labels, arrays)
        dataset.append(
            (
                record,
                FrameSequence(
                    surgery_id=record.surgery_id,
                    features=arrays[f"{record.surgery_id}/features"],
                    progress=labels.progress,
                    rsd_min=labels.rsd_min,
                    elapsed_min=labels.elapsed_min,
                    phase_id=labels.phase_id,
                ),
            )
        )
    return spec, dataset, header.get("metadata", {})


def export_frames(path: str, dataset: Dataset) -> None:
    """One row per frame (labels plus features) as CSV, or JSONL for a .jsonl path."""
    frames = []
    for rec, seq in dataset:
        frame = pd.DataFrame(
            seq.features, columns=[f"f{i}" for i in range(seq.features.shape[1])]
        )
        frame.insert(0, "surgery_id", rec.surgery_id)
        frame.insert(1, "t", np.arange(seq.total_frames))
        frame.insert(2, "phase_id", seq.phase_id)
        frame.insert(3, "progress", seq.progress)
        frame.insert(4, "elapsed_min", seq.elapsed_min)
        frame.insert(5, "rsd_min", seq.rsd_min)
        frames.append(frame)
    table = pd.concat(frames, ignore_index=True)
    if path.endswith(".jsonl"):
        table.to_json(path, orient="records", lines=True)
    else:
        table.to_csv(path, index=False)
    logging.info(f"Exported {len(table)} frames to {path}")
