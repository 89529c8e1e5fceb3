"""
Baselines - closed-form RSD estimators used as comparison anchors:
naive (training mean or median duration minus elapsed time), phase-inferred
from ground-truth phases, and RSD derived from a progress estimate.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from rsdcommon import ConfigError, InputError, PipelineOrderError, StatsError
from rsdlstm import PredictionTrace
from synthsurg import Dataset, DatasetSplit, FrameSequence, SurgeryRecord, index_dataset

METHODS = ("naive-mean", "naive-median", "phase-gt-mean", "phase-gt-median", "progress-derived")
PROG_FLOOR = 0.01
RSD_CAP_FACTOR = 3.0


def lower_median(values: Sequence[float]) -> float:
    """Order-statistic median; the lower of the two middle values for even counts."""
    ordered = sorted(values)
    return float(ordered[(len(ordered) - 1) // 2])


@dataclass(frozen=True)
class ReferenceStats:
    """Reference durations (minutes) from the training surgeries T1 ∪ T2."""

    t_ref_mean: float
    t_ref_median: float
    phase_mean: Tuple[float, ...]
    phase_median: Tuple[float, ...]

    @property
    def n_phases(self) -> int:
        return len(self.phase_mean)

    def total(self, use: str) -> float:
        return self.t_ref_mean if use == "mean" else self.t_ref_median

    def per_phase(self, use: str) -> Tuple[float, ...]:
        return self.phase_mean if use == "mean" else self.phase_median


def _check_use(use: str) -> None:
    if use not in ("mean", "median"):
        raise ConfigError(f"reference statistic must be 'mean' or 'median', got '{use}'")


def compute_reference_stats(
    split: DatasetSplit, dataset: Dataset, n_phases: Optional[int] = None
) -> ReferenceStats:
    by_id = index_dataset(dataset)
    records: List[SurgeryRecord] = [by_id[sid][0] for sid in split.train_ids]
    if not records:
        raise StatsError("reference statistics need a non-empty T1 ∪ T2")
    if n_phases is None:
        n_phases = 1 + max(seg.phase_id for rec, _ in dataset for seg in rec.segments)
    durations = [rec.total_duration_T for rec in records]
    phase_mean, phase_median = [], []
    for phase in range(n_phases):
        observed = [d for d in (rec.phase_duration_min(phase) for rec in records) if d is not None]
        if not observed:
            raise StatsError(f"phase {phase} is absent from every training surgery")
        phase_mean.append(sum(observed) / len(observed))
        phase_median.append(lower_median(observed))
    stats = ReferenceStats(
        t_ref_mean=sum(durations) / len(durations),
        t_ref_median=lower_median(durations),
        phase_mean=tuple(phase_mean),
        phase_median=tuple(phase_median),
    )
    logging.debug(
        f"Reference stats over {len(records)} surgeries: mean {stats.t_ref_mean:.2f} min, "
        f"median {stats.t_ref_median:.2f} min"
    )
    return stats


def naive_rsd(t_el, stats: ReferenceStats, use: str = "median"):
    """max(0, t_ref - t_el)."""
    _check_use(use)
    return np.maximum(stats.total(use) - np.asarray(t_el, dtype=np.float64), 0.0)


def _tail_sums(reference: Sequence[float]) -> List[float]:
    # left-to-right sum of every later phase
    return [sum(reference[p + 1 :], 0.0) for p in range(len(reference))]


def phase_inferred_rsd(phase, t_el_in_phase, stats: ReferenceStats, use: str = "median"):
    """max(0, t_ref^p - t_el^p) + sum of t_ref^m over all later phases m.

    Phases are 0-based. Later phases count even if the current surgery will
    skip them.
    """
    _check_use(use)
    phase = np.asarray(phase)
    if np.any(phase < 0) or np.any(phase >= stats.n_phases):
        raise InputError(f"unknown phase id(s) outside 0..{stats.n_phases - 1}: {phase}")
    reference = np.asarray(stats.per_phase(use))
    tails = np.asarray(_tail_sums(stats.per_phase(use)))
    current = np.maximum(reference[phase] - np.asarray(t_el_in_phase, dtype=np.float64), 0.0)
    return current + tails[phase]


def progress_derived_rsd(t_el, prog, rsd_cap: float, prog_floor: float = PROG_FLOOR):
    """t_el / prog - t_el, or rsd_cap where prog <= prog_floor."""
    t_el = np.asarray(t_el, dtype=np.float64)
    prog = np.asarray(prog, dtype=np.float64)
    safe = np.where(prog > prog_floor, prog, 1.0)
    derived = np.maximum(t_el / safe - t_el, 0.0)
    return np.where(prog > prog_floor, derived, rsd_cap)


def elapsed_in_phase(record: SurgeryRecord) -> np.ndarray:
    """Minutes spent in the current phase at each frame, counting the frame itself."""
    out = np.empty(record.total_frames, dtype=np.float64)
    for seg in record.segments:
        out[seg.start_frame : seg.end_frame] = (
            np.arange(1, seg.end_frame - seg.start_frame + 1) * record.frame_period_s / 60.0
        )
    return out


def naive_trace(sequence: FrameSequence, stats: ReferenceStats, use: str) -> PredictionTrace:
    return PredictionTrace(
        surgery_id=sequence.surgery_id,
        rsd_pred=naive_rsd(sequence.elapsed_min, stats, use),
        rsd_true=sequence.rsd_min,
        elapsed_min=sequence.elapsed_min,
    )


def phase_inferred_trace(
    record: SurgeryRecord, sequence: FrameSequence, stats: ReferenceStats, use: str
) -> PredictionTrace:
    return PredictionTrace(
        surgery_id=sequence.surgery_id,
        rsd_pred=phase_inferred_rsd(sequence.phase_id, elapsed_in_phase(record), stats, use),
        rsd_true=sequence.rsd_min,
        elapsed_min=sequence.elapsed_min,
    )


def progress_derived_trace(
    trace: PredictionTrace,
    stats: ReferenceStats,
    prog_floor: float = PROG_FLOOR,
    rsd_cap_factor: float = RSD_CAP_FACTOR,
) -> PredictionTrace:
    """RSD from a model's progress head via t_el / prog - t_el."""
    if trace.prog_pred is None:
        raise InputError(f"{trace.surgery_id}: trace has no progress predictions")
    return PredictionTrace(
        surgery_id=trace.surgery_id,
        rsd_pred=progress_derived_rsd(
            trace.elapsed_min, trace.prog_pred, rsd_cap_factor * stats.t_ref_median, prog_floor
        ),
        rsd_true=trace.rsd_true,
        elapsed_min=trace.elapsed_min,
        prog_pred=trace.prog_pred,
    )


def run_baseline(
    method: str,
    split: DatasetSplit,
    dataset: Dataset,
    progress_traces: Optional[Sequence[PredictionTrace]] = None,
    n_phases: Optional[int] = None,
    prog_floor: float = PROG_FLOOR,
    rsd_cap_factor: float = RSD_CAP_FACTOR,
) -> List[PredictionTrace]:
    """Traces of one baseline over the split's E-set."""
    if method not in METHODS:
        raise ConfigError(f"Unknown baseline '{method}'. Available: {list(METHODS)}")
    stats = compute_reference_stats(split, dataset, n_phases)
    by_id = index_dataset(dataset)
    if method == "progress-derived":
        if progress_traces is None:
            raise PipelineOrderError(
                "progress-derived needs RSDNet traces with a progress head; run `rsdlstm predict` first"
            )
        by_trace = {t.surgery_id: t for t in progress_traces}
        missing = [sid for sid in split.e_ids if sid not in by_trace]
        if missing:
            raise PipelineOrderError(f"RSDNet traces missing for E-set surgeries, e.g. {missing[0]}")
        return [
            progress_derived_trace(by_trace[sid], stats, prog_floor, rsd_cap_factor)
            for sid in split.e_ids
        ]
    kind, use = method.rsplit("-", 1)
    if kind == "naive":
        return [naive_trace(by_id[sid][1], stats, use) for sid in split.e_ids]
    return [phase_inferred_trace(*by_id[sid], stats, use) for sid in split.e_ids]
