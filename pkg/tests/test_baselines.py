import numpy as np
import pytest

from baselines import (
    compute_reference_stats,
    elapsed_in_phase,
    lower_median,
    naive_rsd,
    phase_inferred_rsd,
    progress_derived_rsd,
    progress_derived_trace,
    run_baseline,
)
from conftest import make_trace
from rsdcommon import ConfigError, InputError, PipelineOrderError, StatsError
from synthsurg import (
    DatasetSplit,
    FrameSequence,
    Segment,
    SurgeryRecord,
    derive_labels,
    make_splits,
)


def _surgery(surgery_id, phases, period_s=60.0):
    """Hand-built surgery from (phase_id, n_frames) pairs; one-minute frames by default."""
    segments, cursor = [], 0
    for phase, frames in phases:
        segments.append(Segment(phase, cursor, cursor + frames))
        cursor += frames
    record = SurgeryRecord(
        surgery_id=surgery_id,
        seed=0,
        segments=tuple(segments),
        total_frames=cursor,
        total_duration_T=cursor * period_s / 60.0,
        style=1.0,
        frame_period_s=period_s,
    )
    labels = derive_labels(record)
    sequence = FrameSequence(
        surgery_id=surgery_id,
        features=np.zeros((cursor, 4), dtype=np.float32),
        progress=labels.progress,
        rsd_min=labels.rsd_min,
        elapsed_min=labels.elapsed_min,
        phase_id=labels.phase_id,
    )
    return record, sequence


@pytest.fixture
def toy():
    dataset = [
        _surgery("A", [(0, 2), (1, 3), (2, 1)]),
        _surgery("B", [(0, 1), (1, 5), (2, 2)]),
        _surgery("C", [(0, 3), (2, 2)]),
        _surgery("D", [(0, 2), (1, 2), (2, 4)]),
        _surgery("E", [(0, 2), (1, 4), (2, 2)]),
    ]
    split = DatasetSplit(t1_ids=("A", "B"), t2_ids=("C", "D"), v_ids=(), e_ids=("E",))
    return dataset, split


def test_lower_median():
    assert lower_median([5, 8, 6, 8]) == 6
    assert lower_median([3, 1, 2]) == 2
    assert lower_median([4.0]) == 4.0


def test_reference_stats_skip_absent_phases(toy):
    dataset, split = toy
    stats = compute_reference_stats(split, dataset)
    assert stats.t_ref_mean == 6.75
    assert stats.t_ref_median == 6.0
    assert stats.phase_mean == (2.0, 10 / 3, 2.25)
    assert stats.phase_median == (2.0, 3.0, 2.0)


def test_reference_stats_ignore_evaluation_surgeries(toy):
    dataset, split = toy
    swapped = DatasetSplit(t1_ids=("A", "B"), t2_ids=("C", "E"), v_ids=(), e_ids=("D",))
    assert compute_reference_stats(split, dataset) != compute_reference_stats(swapped, dataset)


def test_phase_absent_everywhere_is_a_stats_error(toy):
    dataset, split = toy
    with pytest.raises(StatsError, match="phase 3"):
        compute_reference_stats(split, dataset, n_phases=4)
    with pytest.raises(StatsError):
        compute_reference_stats(DatasetSplit((), (), (), ("E",)), dataset)


def test_naive_median_trace(toy):
    dataset, split = toy
    (trace,) = run_baseline("naive-median", split, dataset)
    assert trace.surgery_id == "E"
    np.testing.assert_array_equal(trace.rsd_pred, [5, 4, 3, 2, 1, 0, 0, 0])
    np.testing.assert_array_equal(trace.rsd_true, [7, 6, 5, 4, 3, 2, 1, 0])


def test_phase_inferred_median_trace(toy):
    dataset, split = toy
    (trace,) = run_baseline("phase-gt-median", split, dataset)
    np.testing.assert_array_equal(trace.rsd_pred, [6, 5, 4, 3, 2, 2, 1, 0])


def test_phase_inferred_equals_naive_at_start_without_skips(toy):
    dataset, _ = toy
    no_skip = [item for item in dataset if item[0].surgery_id != "C"]
    split = DatasetSplit(t1_ids=("A", "B"), t2_ids=("D",), v_ids=(), e_ids=("E",))
    stats = compute_reference_stats(split, no_skip)
    assert stats.t_ref_mean == pytest.approx(sum(stats.phase_mean))
    start = phase_inferred_rsd(np.array([0]), np.array([0.0]), stats, "mean")
    assert float(start[0]) == pytest.approx(float(naive_rsd(0.0, stats, "mean")))


def test_elapsed_in_phase_restarts_each_segment(toy):
    record, _ = toy[0][4]
    np.testing.assert_array_equal(elapsed_in_phase(record), [1, 2, 1, 2, 3, 4, 1, 2])


def test_unknown_phase_is_an_input_error(toy):
    dataset, split = toy
    stats = compute_reference_stats(split, dataset)
    with pytest.raises(InputError):
        phase_inferred_rsd(np.array([0, 3]), np.array([1.0, 1.0]), stats)


def test_unknown_method(toy):
    dataset, split = toy
    with pytest.raises(ConfigError, match="Available"):
        run_baseline("oracle", split, dataset)
    stats = compute_reference_stats(split, dataset)
    with pytest.raises(ConfigError):
        naive_rsd([1.0], stats, use="mode")


def _brute_force(method, split, dataset):
    by_id = {rec.surgery_id: (rec, seq) for rec, seq in dataset}
    train = [by_id[sid][0] for sid in split.train_ids]
    n_phases = 1 + max(seg.phase_id for rec, _ in dataset for seg in rec.segments)
    kind, use = method.rsplit("-", 1)

    def reduce(values):
        if use == "mean":
            return sum(values) / len(values)
        return sorted(values)[(len(values) - 1) // 2]

    t_ref = reduce([rec.total_duration_T for rec in train])
    phase_ref = []
    for p in range(n_phases):
        phase_ref.append(reduce([d for d in (rec.phase_duration_min(p) for rec in train) if d is not None]))

    expected = {}
    for sid in split.e_ids:
        rec, seq = by_id[sid]
        preds = []
        for seg in rec.segments:
            for k in range(seg.end_frame - seg.start_frame):
                t = seg.start_frame + k
                if kind == "naive":
                    preds.append(max(t_ref - float(seq.elapsed_min[t]), 0.0))
                else:
                    in_phase = (k + 1) * rec.frame_period_s / 60.0
                    later = 0.0
                    for m in range(seg.phase_id + 1, n_phases):
                        later += phase_ref[m]
                    preds.append(max(phase_ref[seg.phase_id] - in_phase, 0.0) + later)
        expected[sid] = np.array(preds)
    return expected


@pytest.mark.parametrize("method", ["naive-mean", "naive-median", "phase-gt-mean", "phase-gt-median"])
def test_baselines_match_brute_force(method, small_dataset):
    (split,) = make_splits(small_dataset, [1 / 3, 1 / 3, 1 / 12, 1 / 4], n_folds=1, seed=5)
    expected = _brute_force(method, split, small_dataset)
    traces = run_baseline(method, split, small_dataset)
    assert [t.surgery_id for t in traces] == list(split.e_ids)
    for trace in traces:
        np.testing.assert_array_equal(trace.rsd_pred, expected[trace.surgery_id])


def test_progress_derived_formula():
    out = progress_derived_rsd([2.0, 3.0, 0.1], [0.5, 1.0, 0.005], rsd_cap=99.0)
    np.testing.assert_allclose(out, [2.0, 0.0, 99.0])


def test_progress_derived_on_true_progress_recovers_true_rsd(toy):
    dataset, split = toy
    _, seq = dataset[4]
    rnn_trace = make_trace(seq.rsd_min, np.zeros(8), surgery_id="E", prog_pred=seq.progress)
    (trace,) = run_baseline("progress-derived", split, dataset, progress_traces=[rnn_trace])
    np.testing.assert_allclose(trace.rsd_pred, seq.rsd_min, rtol=1e-12, atol=1e-12)


def test_progress_derived_caps_at_multiple_of_median(toy):
    dataset, split = toy
    stats = compute_reference_stats(split, dataset)
    trace = make_trace([1.0, 0.0], [0.0, 0.0], prog_pred=np.array([0.0, 1.0]))
    derived = progress_derived_trace(trace, stats, rsd_cap_factor=3.0)
    assert derived.rsd_pred[0] == 18.0


def test_progress_derived_needs_progress_head(toy):
    dataset, split = toy
    stats = compute_reference_stats(split, dataset)
    with pytest.raises(InputError):
        progress_derived_trace(make_trace([1.0, 0.0], [1.0, 0.0]), stats)


def test_progress_derived_needs_traces(toy):
    dataset, split = toy
    with pytest.raises(PipelineOrderError):
        run_baseline("progress-derived", split, dataset)
    other = make_trace([1.0, 0.0], [1.0, 0.0], surgery_id="A", prog_pred=np.array([0.5, 1.0]))
    with pytest.raises(PipelineOrderError, match="E"):
        run_baseline("progress-derived", split, dataset, progress_traces=[other])
