"""Metric definitions vs set-based oracles, baselines, and report assembly."""
from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from tiloc.metrics_eval import (
    METRIC_ORDER,
    EvalError,
    EventEstimate,
    InvalidIntervalError,
    LengthMismatchError,
    ReportRow,
    VideoOutcome,
    aggregate,
    baseline_greedy,
    baseline_iterative,
    evaluate_manifest,
    evaluate_video,
    greedy_grid_side,
    interval_iou,
    mean_absolute_error,
    mean_over_frames,
    method_rows,
    stage_labels,
    success_rate,
    trial_metrics,
    write_report,
)
from tiloc.sequence_store import (
    EmptyManifestError,
    Manifest,
    load_manifest,
    save_manifest,
)
from tiloc.synth import SynthConfig, generate_sequence
from tiloc.til_engine import EngineConfig
from tiloc.vlm_gateway import CountingBackend, make_scripted_oracle

from conftest import make_sequence


def _stage_sets(n: int, c: int, s: int) -> dict[str, frozenset[int]]:
    return {
        "pre": frozenset(range(0, c)),
        "in": frozenset(range(c, s + 1)),
        "post": frozenset(range(s + 1, n)),
    }


def _mof_oracle(n: int, est: tuple[int, int], gt: tuple[int, int]) -> float:
    a, b = _stage_sets(n, *est), _stage_sets(n, *gt)
    agree = sum(len(a[k] & b[k]) for k in ("pre", "in", "post"))
    return agree / n


def _iou_oracle(gt: tuple[int, int], est: tuple[int, int]) -> float:
    g = set(range(gt[0], gt[1] + 1))
    e = set(range(est[0], est[1] + 1))
    return len(g & e) / len(g | e)


# --- frozen examples ---


def test_stage_labels_examples():
    assert stage_labels(6, 2, 4) == ["pre", "pre", "in", "in", "in", "post"]
    assert stage_labels(6, 0, 5) == ["in"] * 6


@pytest.mark.parametrize("bad", [(3, 3), (5, 3), (-1, 5), (3, 10)])
def test_stage_labels_rejects_bad_intervals(bad):
    with pytest.raises(InvalidIntervalError):
        stage_labels(10, *bad)


def test_success_rate_example():
    assert success_rate([1, 3], gamma=2) == 0.5
    assert success_rate([-1, 1, 0, 4], gamma=1) == 0.75
    with pytest.raises(EvalError):
        success_rate([], gamma=1)


def test_success_rate_symmetric_and_monotone():
    errors = [-3, -1, 0, 2, 5]
    flipped = [-e for e in errors]
    rates = [success_rate(errors, g) for g in (0, 1, 2, 3, 4, 5)]
    assert rates == [success_rate(flipped, g) for g in (0, 1, 2, 3, 4, 5)]
    assert rates == sorted(rates)
    assert rates[-1] == 1.0


def test_mae_example():
    assert mean_absolute_error([(1, 0)]) == 0.5
    assert mean_absolute_error([(1, 1), (3, 3)]) == 2.0


def test_mof_example():
    got = mean_over_frames(stage_labels(20, 6, 12), stage_labels(20, 5, 12))
    assert got == 0.95


def test_mof_length_mismatch():
    with pytest.raises(LengthMismatchError):
        mean_over_frames(["pre"], ["pre", "in"])


def test_iou_example():
    assert interval_iou(EventEstimate(5, 12), EventEstimate(6, 12)) == 0.875
    assert interval_iou(EventEstimate(5, 12), EventEstimate(5, 12)) == 1.0
    assert interval_iou(EventEstimate(0, 3), EventEstimate(10, 12)) == 0.0


def test_aggregate():
    assert aggregate([1.0, 3.0]) == (2.0, 1.0)
    assert aggregate([4.2]) == (4.2, 0.0)


# --- random-instance equivalence against the set oracles ---


def test_metrics_match_set_oracles():
    rng = np.random.default_rng(5)
    for _ in range(300):
        n = int(rng.integers(4, 80))
        gt_c = int(rng.integers(0, n - 2))
        gt_s = int(rng.integers(gt_c + 1, n))
        e_c = int(rng.integers(0, n - 2))
        e_s = int(rng.integers(e_c + 1, n))
        mof = mean_over_frames(stage_labels(n, e_c, e_s), stage_labels(n, gt_c, gt_s))
        assert mof == _mof_oracle(n, (e_c, e_s), (gt_c, gt_s))
        iou = interval_iou(EventEstimate(gt_c, gt_s), EventEstimate(e_c, e_s))
        assert iou == _iou_oracle((gt_c, gt_s), (e_c, e_s))


def test_trial_metrics_match_direct_computation():
    videos = [
        VideoOutcome("a", 20, EventEstimate(5, 12), (EventEstimate(6, 12),), (None,)),
        VideoOutcome("b", 30, EventEstimate(10, 20), (EventEstimate(10, 23),), (None,)),
    ]
    m = trial_metrics(videos, 0)
    assert m["sr@1"] == 0.75  # pooled errors (1, 0, 0, 3)
    assert m["sr@3"] == 1.0
    assert m["mae"] == (0.5 + 1.5) / 2
    assert m["mae_contact"] == 0.5
    assert m["mae_separation"] == 1.5
    assert m["mof"] == (0.95 + _mof_oracle(30, (10, 23), (10, 20))) / 2
    assert m["iou"] == (0.875 + _iou_oracle((10, 20), (10, 23))) / 2
    assert m["failure_rate"] == 0.0
    assert set(m) == set(METRIC_ORDER)


def test_trial_metrics_failure_accounting():
    ok = EventEstimate(5, 12)
    videos = [
        VideoOutcome("a", 20, EventEstimate(5, 12), (ok,), (None,)),
        VideoOutcome("b", 20, EventEstimate(5, 12), (None,), ("boom",)),
        VideoOutcome("c", 20, EventEstimate(5, 12), (EventEstimate(9, 9),), (None,)),
    ]
    m = trial_metrics(videos, 0)
    assert m["failure_rate"] == pytest.approx(2 / 3)
    assert m["mae"] == 0.0  # only the clean video contributes


def test_trial_metrics_all_failed_raises():
    videos = [
        VideoOutcome("a", 20, EventEstimate(5, 12), (None,), ("x",)),
    ]
    with pytest.raises(EvalError):
        trial_metrics(videos, 0)


# --- baselines ---


def test_greedy_grid_side():
    assert [greedy_grid_side(n) for n in (2, 9, 10, 16, 17, 150)] == [2, 3, 4, 4, 4, 4]
    assert greedy_grid_side(150, max_side=13) == 13


def test_greedy_exact_when_clip_fits_grid():
    seq = make_sequence(n_frames=9, gt=(2, 6))
    backend = CountingBackend(make_scripted_oracle(seq.annotation))
    assert baseline_greedy(seq, backend) == EventEstimate(2, 6)
    assert backend.total_calls == 2

    seq10 = make_sequence(n_frames=10, gt=(3, 7))
    est = baseline_greedy(seq10, make_scripted_oracle(seq10.annotation))
    assert est == EventEstimate(3, 7)


def test_greedy_error_bounded_by_tile_spacing(synth_seq):
    backend = make_scripted_oracle(synth_seq.annotation)
    est = baseline_greedy(synth_seq, backend)
    assert est == EventEstimate(40, 109)
    spacing = (synth_seq.n_frames - 1) / (greedy_grid_side(synth_seq.n_frames) ** 2 - 1)
    assert abs(est.separation - 105) <= spacing / 2 + 1


def test_iterative_single_query_per_event_on_short_clip():
    seq = make_sequence(n_frames=4, gt=(1, 2))
    backend = CountingBackend(make_scripted_oracle(seq.annotation))
    assert baseline_iterative(seq, backend) == EventEstimate(1, 2)
    assert backend.total_calls == 2


def test_iterative_converges_near_truth():
    seq = make_sequence(n_frames=30, gt=(9, 21))
    backend = CountingBackend(make_scripted_oracle(seq.annotation))
    est = baseline_iterative(seq, backend)
    assert est == EventEstimate(9, 22)
    assert abs(est.contact - 9) <= 1 and abs(est.separation - 21) <= 1
    assert backend.total_calls == 6


def test_iterative_on_long_clip(synth_seq):
    backend = CountingBackend(make_scripted_oracle(synth_seq.annotation))
    est = baseline_iterative(synth_seq, backend)
    assert est == EventEstimate(40, 104)
    assert backend.total_calls == 12


# --- evaluation drivers ---


def test_evaluate_video_requires_annotation():
    seq = make_sequence(n_frames=10)
    with pytest.raises(EvalError):
        evaluate_video(seq, "greedy", EngineConfig(), make_scripted_oracle(None))


def test_evaluate_video_rejects_unknown_method():
    seq = make_sequence(n_frames=10, gt=(2, 6))
    with pytest.raises(EvalError):
        evaluate_video(seq, "magic", EngineConfig(), make_scripted_oracle(seq.annotation))


def test_evaluate_video_replicates_baseline_across_trials():
    seq = make_sequence(n_frames=9, gt=(2, 6))
    out = evaluate_video(
        seq, "greedy", EngineConfig(trials=3), make_scripted_oracle(seq.annotation)
    )
    assert out.estimates == (EventEstimate(2, 6),) * 3
    assert out.errors == (None,) * 3


def test_method_rows_order_and_shape():
    videos = [
        VideoOutcome("a", 20, EventEstimate(5, 12), (EventEstimate(6, 12),) * 2, (None,) * 2),
    ]
    rows = method_rows("demo", "egoloc", EngineConfig(trials=2), videos)
    assert [r.metric for r in rows] == list(METRIC_ORDER)
    assert all(isinstance(r, ReportRow) for r in rows)
    assert all(r.dataset == "demo" and r.method == "egoloc" and r.n_adj == 2 for r in rows)
    assert all(r.stddev == 0.0 for r in rows)  # identical trials


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    for i, (c, s) in enumerate([(10, 28), (12, 25)]):
        cfg = SynthConfig(
            n_frames=40, contact_frame=c, separation_frame=s,
            width=64, height=48, seed=20 + i,
        )
        generate_sequence(cfg, root / f"seq_{i}")
    save_manifest(root / "manifest.txt", ["seq_0", "seq_1"])
    return load_manifest(root / "manifest.txt")


def test_evaluate_manifest_rows_and_parallel_determinism(tiny_corpus):
    config = EngineConfig(trials=2, seed=1)
    factory = lambda seq: make_scripted_oracle(seq.annotation)
    serial = evaluate_manifest(tiny_corpus, ["egoloc", "greedy"], config, factory, jobs=1)
    threaded = evaluate_manifest(tiny_corpus, ["egoloc", "greedy"], config, factory, jobs=4)
    assert serial == threaded
    assert serial["schema"] == "til-eval/1"
    assert serial["n_videos"] == 2
    assert len(serial["rows"]) == 2 * len(METRIC_ORDER)
    methods = {r["method"] for r in serial["rows"]}
    assert methods == {"egoloc", "greedy"}


def test_evaluate_manifest_rejects_empty():
    with pytest.raises(EmptyManifestError):
        evaluate_manifest(
            Manifest(dataset_name="x", entries=[]), ["greedy"], EngineConfig(),
            lambda seq: make_scripted_oracle(seq.annotation),
        )


def test_write_report_round_trip(tiny_corpus, tmp_path):
    config = EngineConfig(trials=2, seed=1)
    report = evaluate_manifest(
        tiny_corpus, ["greedy"], config,
        lambda seq: make_scripted_oracle(seq.annotation),
    )
    json_path, csv_path = write_report(report, tmp_path)
    assert json.loads(json_path.read_text())["rows"] == report["rows"]
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["dataset", "method", "n_adj", "metric", "mean", "stddev"]
    assert len(rows) == 1 + len(report["rows"])
    # repr round-trips floats exactly
    assert float(rows[1][4]) == report["rows"][0]["mean"]
