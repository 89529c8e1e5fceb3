"""
Evaluation protocol over prediction traces.

Every summary is computed from per-surgery scores (SurgeryScore), so a
report can be saved, reloaded and pooled across folds without the raw
traces. Errors are signed as rsd_pred - rsd_true: positive means the RSD
was over-estimated.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from rsdcommon import PipelineOrderError, ProtocolError, parallel_map
from rsdio import atomic_write_bytes
from rsdlstm import PredictionTrace

CATEGORIES = ("complete", "short", "medium", "long")
CURVE_VALUES = (5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
N_QUARTERS = 4


def duration_quartiles(durations: Sequence[float]) -> Tuple[float, float]:
    """Q1 and Q3 of the surgery durations (linear interpolation)."""
    q1, q3 = np.percentile(np.asarray(durations, dtype=np.float64), [25, 75])
    return float(q1), float(q3)


def categorize(total_duration: float, q1: float, q3: float) -> str:
    """short if T < Q1, long if T > Q3, medium otherwise (ties land in medium)."""
    if total_duration < q1:
        return "short"
    if total_duration > q3:
        return "long"
    return "medium"


@dataclass
class Stat:
    """Mean and population std over the surgeries where a quantity is defined."""

    mean: Optional[float]
    std: Optional[float]
    n_defined: int
    n_excluded: int = 0

    @property
    def defined(self) -> bool:
        return self.n_defined > 0

    def render(self, digits: int = 2) -> str:
        if not self.defined:
            return "undefined"
        return f"{self.mean:.{digits}f} ± {self.std:.{digits}f}"


def summarize(values: Sequence[Optional[float]]) -> Stat:
    defined = [v for v in values if v is not None]
    excluded = len(values) - len(defined)
    if not defined:
        return Stat(mean=None, std=None, n_defined=0, n_excluded=excluded)
    arr = np.asarray(defined, dtype=np.float64)
    return Stat(mean=float(arr.mean()), std=float(arr.std()), n_defined=len(defined), n_excluded=excluded)


@dataclass
class QuarterScore:
    """Sufficient statistics of one surgery's errors inside one quarter."""

    n: int = 0
    n_under: int = 0
    n_over: int = 0
    under_sum: float = 0.0
    under_sumsq: float = 0.0
    over_sum: float = 0.0
    over_sumsq: float = 0.0
    abs_sum: float = 0.0

    @classmethod
    def from_errors(cls, errors: np.ndarray) -> "QuarterScore":
        under = -errors[errors < 0]
        over = errors[errors > 0]
        return cls(
            n=int(len(errors)),
            n_under=int(len(under)),
            n_over=int(len(over)),
            under_sum=float(under.sum()),
            under_sumsq=float((under**2).sum()),
            over_sum=float(over.sum()),
            over_sumsq=float((over**2).sum()),
            abs_sum=float(np.abs(errors).sum()),
        )


@dataclass
class SurgeryScore:
    surgery_id: str
    total_duration: float
    mae: float
    reliability: List[Optional[float]]
    accuracy: List[Optional[float]]
    quarters: List[QuarterScore]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SurgeryScore":
        return cls(
            surgery_id=data["surgery_id"],
            total_duration=float(data["total_duration"]),
            mae=float(data["mae"]),
            reliability=list(data["reliability"]),
            accuracy=list(data["accuracy"]),
            quarters=[QuarterScore(**q) for q in data["quarters"]],
        )


def trace_errors(trace: PredictionTrace) -> np.ndarray:
    return np.asarray(trace.rsd_pred, dtype=np.float64) - np.asarray(trace.rsd_true, dtype=np.float64)


def surgery_mae(trace: PredictionTrace) -> float:
    return float(np.mean(np.abs(trace_errors(trace))))


def reliability_error(trace: PredictionTrace, threshold: float) -> Optional[float]:
    """Error at the last frame where the prediction crosses down to <= threshold.

    A prediction that already sits at or below the threshold on the first
    frame counts as crossing there. None if the prediction never reaches it.
    """
    pred = np.asarray(trace.rsd_pred, dtype=np.float64)
    below = pred <= threshold
    entering = below.copy()
    entering[1:] &= ~below[:-1]
    hits = np.flatnonzero(entering)
    if len(hits) == 0:
        return None
    t = int(hits[-1])
    return float(abs(float(trace.rsd_true[t]) - pred[t]))


def accuracy_error(trace: PredictionTrace, gt_value: float) -> Optional[float]:
    """|rsd_pred - g| at the frame whose true RSD is nearest g, within half a frame period."""
    true = np.asarray(trace.rsd_true, dtype=np.float64)
    t = int(np.argmin(np.abs(true - gt_value)))
    if abs(true[t] - gt_value) > 0.5 * trace.frame_period_min + 1e-9:
        return None
    return float(abs(float(trace.rsd_pred[t]) - gt_value))


def score_trace(
    trace: PredictionTrace,
    thresholds: Sequence[float] = CURVE_VALUES,
    gt_values: Sequence[float] = CURVE_VALUES,
) -> SurgeryScore:
    errors = trace_errors(trace)
    spans = np.array_split(np.arange(trace.total_frames), N_QUARTERS)
    return SurgeryScore(
        surgery_id=trace.surgery_id,
        total_duration=trace.total_duration,
        mae=float(np.mean(np.abs(errors))),
        reliability=[reliability_error(trace, tau) for tau in thresholds],
        accuracy=[accuracy_error(trace, g) for g in gt_values],
        quarters=[QuarterScore.from_errors(errors[span]) for span in spans],
    )


@dataclass
class QuarterStats:
    """One row of the under/over table; error magnitudes are in minutes."""

    under_mean: Optional[float]
    under_std: Optional[float]
    under_frac: Optional[float]
    over_mean: Optional[float]
    over_std: Optional[float]
    over_frac: Optional[float]
    exact_frac: Optional[float]
    mae: Stat


def _pooled(total: float, sumsq: float, n: int) -> Tuple[Optional[float], Optional[float]]:
    if n == 0:
        return None, None
    mean = total / n
    return mean, float(np.sqrt(max(sumsq / n - mean * mean, 0.0)))


def quarter_stats(quarters: Sequence[QuarterScore]) -> QuarterStats:
    """Fractions averaged over surgeries; error magnitudes pooled over frames."""
    filled = [q for q in quarters if q.n > 0]
    under_mean, under_std = _pooled(
        sum(q.under_sum for q in filled), sum(q.under_sumsq for q in filled), sum(q.n_under for q in filled)
    )
    over_mean, over_std = _pooled(
        sum(q.over_sum for q in filled), sum(q.over_sumsq for q in filled), sum(q.n_over for q in filled)
    )

    def frac(values: List[float]) -> Optional[float]:
        return float(np.mean(values)) if values else None

    under_fracs = [q.n_under / q.n for q in filled]
    over_fracs = [q.n_over / q.n for q in filled]
    return QuarterStats(
        under_mean=under_mean,
        under_std=under_std,
        under_frac=frac(under_fracs),
        over_mean=over_mean,
        over_std=over_std,
        over_frac=frac(over_fracs),
        exact_frac=frac([1.0 - u - o for u, o in zip(under_fracs, over_fracs)]),
        mae=summarize([q.abs_sum / q.n for q in filled]),
    )


@dataclass
class EvalReport:
    method: str
    q1: float
    q3: float
    thresholds: Tuple[float, ...] = CURVE_VALUES
    gt_values: Tuple[float, ...] = CURVE_VALUES
    scores: List[SurgeryScore] = field(default_factory=list)

    def category_of(self, score: SurgeryScore) -> str:
        return categorize(score.total_duration, self.q1, self.q3)

    def cohort(self, category: str) -> List[SurgeryScore]:
        if category == "complete":
            return list(self.scores)
        return [s for s in self.scores if self.category_of(s) == category]

    def mae(self) -> Dict[str, Stat]:
        return {cat: summarize([s.mae for s in self.cohort(cat)]) for cat in CATEGORIES}

    def reliability(self) -> Dict[str, List[Stat]]:
        return {
            cat: [summarize([s.reliability[i] for s in self.cohort(cat)]) for i in range(len(self.thresholds))]
            for cat in CATEGORIES
        }

    def accuracy(self) -> Dict[str, List[Stat]]:
        return {
            cat: [summarize([s.accuracy[i] for s in self.cohort(cat)]) for i in range(len(self.gt_values))]
            for cat in CATEGORIES
        }

    def under_over(self) -> Dict[str, List[QuarterStats]]:
        return {
            cat: [quarter_stats([s.quarters[k] for s in self.cohort(cat)]) for k in range(N_QUARTERS)]
            for cat in CATEGORIES
        }

    def category_counts(self) -> Dict[str, int]:
        return {cat: len(self.cohort(cat)) for cat in CATEGORIES}

    def curves_frame(self) -> pd.DataFrame:
        rows = []
        for curve, values, table in (
            ("reliability", self.thresholds, self.reliability()),
            ("accuracy", self.gt_values, self.accuracy()),
        ):
            for cat in CATEGORIES:
                for value, stat in zip(values, table[cat]):
                    rows.append(
                        {
                            "method": self.method,
                            "curve": curve,
                            "category": cat,
                            "threshold": value,
                            "mae_mean": stat.mean,
                            "mae_std": stat.std,
                            "n_defined": stat.n_defined,
                            "n_excluded": stat.n_excluded,
                        }
                    )
        return pd.DataFrame(rows)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "q1": self.q1,
            "q3": self.q3,
            "thresholds": list(self.thresholds),
            "gt_values": list(self.gt_values),
            "category_counts": self.category_counts(),
            "mae": {cat: asdict(stat) for cat, stat in self.mae().items()},
            "reliability": {cat: [asdict(s) for s in stats] for cat, stats in self.reliability().items()},
            "accuracy": {cat: [asdict(s) for s in stats] for cat, stats in self.accuracy().items()},
            "under_over": {cat: [asdict(q) for q in rows] for cat, rows in self.under_over().items()},
            "scores": [s.to_dict() for s in self.scores],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalReport":
        # summaries are recomputed from the per-surgery scores
        return cls(
            method=data["method"],
            q1=float(data["q1"]),
            q3=float(data["q3"]),
            thresholds=tuple(data["thresholds"]),
            gt_values=tuple(data["gt_values"]),
            scores=[SurgeryScore.from_dict(s) for s in data["scores"]],
        )

    def render_text(self) -> str:
        counts = self.category_counts()
        lines = [
            f"Method: {self.method}",
            f"Quartiles: Q1 {self.q1:.2f} min, Q3 {self.q3:.2f} min; "
            + ", ".join(f"{cat} {counts[cat]}" for cat in CATEGORIES),
            "",
            "MAE (minutes)",
            pd.DataFrame([{cat: stat.render() for cat, stat in self.mae().items()}]).to_string(index=False),
        ]
        for title, values, table in (
            ("MAE vs. predicted RSD", self.thresholds, self.reliability()),
            ("MAE vs. ground-truth RSD", self.gt_values, self.accuracy()),
        ):
            frame = pd.DataFrame(
                {cat: [s.render() for s in table[cat]] for cat in CATEGORIES},
                index=[f"{v:g}" for v in values],
            )
            frame.index.name = "rsd"
            lines += ["", title, frame.to_string()]
        rows = []
        for cat, quarters in self.under_over().items():
            for k, q in enumerate(quarters, start=1):
                rows.append(
                    {
                        "category": cat,
                        "quarter": k,
                        "under": _render_pair(q.under_mean, q.under_std),
                        "under_frac": _render_frac(q.under_frac),
                        "over": _render_pair(q.over_mean, q.over_std),
                        "over_frac": _render_frac(q.over_frac),
                        "mae": q.mae.render(),
                    }
                )
        lines += ["", "Under/over-estimation per quarter", pd.DataFrame(rows).to_string(index=False)]
        return "\n".join(lines) + "\n"


def _render_pair(mean: Optional[float], std: Optional[float]) -> str:
    return "-" if mean is None else f"{mean:.2f} ± {std:.2f}"


def _render_frac(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.2f}"


def mae_by_category(traces: Sequence[PredictionTrace], q1: float, q3: float) -> Dict[str, Stat]:
    ordered = sorted(traces, key=lambda t: t.surgery_id)
    report = EvalReport(method="", q1=q1, q3=q3, scores=[score_trace(t) for t in ordered])
    return report.mae()


def reliability_curve(traces: Sequence[PredictionTrace], thresholds: Sequence[float] = CURVE_VALUES) -> List[Stat]:
    return [summarize([reliability_error(t, tau) for t in traces]) for tau in thresholds]


def accuracy_curve(traces: Sequence[PredictionTrace], gt_values: Sequence[float] = CURVE_VALUES) -> List[Stat]:
    return [summarize([accuracy_error(t, g) for t in traces]) for g in gt_values]


def under_over_table(traces: Sequence[PredictionTrace]) -> List[QuarterStats]:
    spans = [np.array_split(trace_errors(t), N_QUARTERS) for t in traces]
    return [quarter_stats([QuarterScore.from_errors(s[k]) for s in spans]) for k in range(N_QUARTERS)]


def evaluate_traces(
    method: str,
    traces: Sequence[PredictionTrace],
    q1: float,
    q3: float,
    thresholds: Sequence[float] = CURVE_VALUES,
    gt_values: Sequence[float] = CURVE_VALUES,
    threads: Optional[int] = None,
) -> EvalReport:
    # deterministic reduction order
    ordered = sorted(traces, key=lambda t: t.surgery_id)
    scores = parallel_map(lambda t: score_trace(t, thresholds, gt_values), ordered, threads)
    report = EvalReport(
        method=method, q1=q1, q3=q3, thresholds=tuple(thresholds), gt_values=tuple(gt_values), scores=scores
    )
    logging.info(f"{method}: MAE {report.mae()['complete'].render()} min over {len(scores)} surgeries")
    return report


def aggregate_folds(reports: Sequence[EvalReport]) -> EvalReport:
    """Pool per-surgery scores of several folds into one cross-validated report."""
    if not reports:
        raise ProtocolError("no fold reports to aggregate")
    first = reports[0]
    seen: Dict[str, int] = {}
    for fold, report in enumerate(reports):
        if report.method != first.method:
            raise ProtocolError(f"cannot pool '{report.method}' with '{first.method}'")
        if (report.q1, report.q3) != (first.q1, first.q3):
            raise ProtocolError("fold reports were scored with different dataset quartiles")
        if report.thresholds != first.thresholds or report.gt_values != first.gt_values:
            raise ProtocolError("fold reports use different curve values")
        for score in report.scores:
            if score.surgery_id in seen:
                raise ProtocolError(
                    f"surgery {score.surgery_id} is evaluated in fold {seen[score.surgery_id]} and fold {fold}"
                )
            seen[score.surgery_id] = fold
    scores = sorted((s for r in reports for s in r.scores), key=lambda s: s.surgery_id)
    return EvalReport(
        method=first.method,
        q1=first.q1,
        q3=first.q3,
        thresholds=first.thresholds,
        gt_values=first.gt_values,
        scores=scores,
    )


def compare_reports(reports: Sequence[EvalReport]) -> str:
    """One row per method with MAE per category, to three decimals."""
    rows = []
    for report in reports:
        row = {"method": report.method}
        row.update({cat: stat.render(3) for cat, stat in report.mae().items()})
        rows.append(row)
    return pd.DataFrame(rows, columns=["method", *CATEGORIES]).to_string(index=False) + "\n"


def write_report(
    report: EvalReport,
    json_path: str,
    text_path: str,
    curves_path: str,
    metadata: Optional[Dict[str, Any]] = None,
) -> None:
    payload = report.to_dict()
    if metadata:
        payload["metadata"] = metadata
    atomic_write_bytes(json_path, json.dumps(payload, indent=2).encode("utf-8"))
    atomic_write_bytes(text_path, report.render_text().encode("utf-8"))
    atomic_write_bytes(curves_path, report.curves_frame().to_csv(index=False).encode("utf-8"))
    logging.debug(f"Wrote report for {report.method} to {json_path}")


def read_report(path: str) -> EvalReport:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return EvalReport.from_dict(json.load(f))
    except FileNotFoundError:
        raise PipelineOrderError(f"report {path} not found; run `evaluate` first")
