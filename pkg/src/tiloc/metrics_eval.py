"""Metrics, baseline localizers, and the manifest-level evaluator.

Metric conventions:

* Success rate pools both events of every video, then takes the fraction of
  absolute errors within gamma frames.
* MAE averages the two event errors per video, then averages across videos.
* MoF compares the three-stage labeling (pre / in / post) frame by frame.
* IoU treats [contact, separation] as an inclusive frame set.

Per-trial metrics skip videos whose trial failed; the skipped fraction is
reported separately as failure_rate.  Aggregation across trials reports the
mean and the population standard deviation.
"""

from __future__ import annotations

import csv
import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence as Seq

import numpy as np

from . import __version__
from .sampler import SearchWindow, compose_grid
from .sequence_store import EmptyManifestError, Manifest, Sequence, load_sequence
from .til_engine import EngineConfig, TrialRecord, config_dict, run_trials
from .vlm_gateway import Backend, LocalizeQuery, localize

GREEDY_MAX_SIDE = 4

REPORT_GAMMAS = (1, 2, 3)

METRIC_ORDER = (
    "sr@1", "sr@2", "sr@3",
    "mae", "mae_contact", "mae_separation",
    "mof", "iou", "failure_rate",
)


class EvalError(Exception):
    """Evaluation cannot proceed (no ground truth, empty manifest, ...)."""


class InvalidIntervalError(EvalError):
    """Contact does not strictly precede separation inside the clip."""


class LengthMismatchError(EvalError):
    """Compared labelings cover different frame counts."""


@dataclass(frozen=True)
class EventEstimate:
    contact: int
    separation: int


@dataclass(frozen=True)
class VideoOutcome:
    """One video under one method: per-trial estimates or failure notes."""

    video: str
    n_frames: int
    gt: EventEstimate
    estimates: tuple[EventEstimate | None, ...]  # index = trial
    errors: tuple[str | None, ...]


@dataclass(frozen=True)
class ReportRow:
    dataset: str
    method: str
    n_adj: int
    metric: str
    mean: float
    stddev: float


def stage_labels(n_frames: int, contact: int, separation: int) -> list[str]:
    """Three-stage labeling: pre before contact, in through separation, post after."""
    if not 0 <= contact < separation <= n_frames - 1:
        raise InvalidIntervalError(
            f"need 0 <= contact < separation <= {n_frames - 1}, "
            f"got ({contact}, {separation})"
        )
    labels = []
    for t in range(n_frames):
        if t < contact:
            labels.append("pre")
        elif t <= separation:
            labels.append("in")
        else:
            labels.append("post")
    return labels


def success_rate(errors: Seq[float], gamma: float = 1.0) -> float:
    """Fraction of pooled event errors within gamma frames."""
    if not errors:
        raise EvalError("success rate over zero events")
    return sum(1 for e in errors if abs(e) <= gamma) / len(errors)


def mean_absolute_error(per_video_errors: Seq[tuple[float, float]]) -> float:
    """Mean of per-video mean absolute event errors."""
    if not per_video_errors:
        raise EvalError("MAE over zero videos")
    return float(
        np.mean([(abs(c) + abs(s)) / 2.0 for c, s in per_video_errors])
    )


def mean_over_frames(pred: Seq[str], truth: Seq[str]) -> float:
    """Fraction of frames whose stage labels agree."""
    if len(pred) != len(truth):
        raise LengthMismatchError(f"{len(pred)} vs {len(truth)} frames")
    return sum(1 for a, b in zip(pred, truth) if a == b) / len(truth)


def interval_iou(gt: EventEstimate, est: EventEstimate) -> float:
    """IoU of the inclusive in-contact frame sets."""
    lo = max(gt.contact, est.contact)
    hi = min(gt.separation, est.separation)
    inter = max(0, hi - lo + 1)
    len_gt = gt.separation - gt.contact + 1
    len_est = est.separation - est.contact + 1
    union = len_gt + len_est - inter
    return inter / union


def trial_metrics(
    videos: Seq[VideoOutcome], trial: int, gammas: Seq[float] = REPORT_GAMMAS
) -> dict[str, float]:
    """Metrics for one trial across all videos; failed videos are excluded."""
    pooled: list[float] = []
    per_video: list[tuple[float, float]] = []
    mofs: list[float] = []
    ious: list[float] = []
    failed = 0
    for v in videos:
        est = v.estimates[trial]
        # A backwards pair is not a usable (contact, separation) interval;
        # count it against the method rather than crash the stage metrics.
        if est is None or est.contact >= est.separation:
            failed += 1
            continue
        c_err = est.contact - v.gt.contact
        s_err = est.separation - v.gt.separation
        pooled.extend((c_err, s_err))
        per_video.append((c_err, s_err))
        mofs.append(
            mean_over_frames(
                stage_labels(v.n_frames, est.contact, est.separation),
                stage_labels(v.n_frames, v.gt.contact, v.gt.separation),
            )
        )
        ious.append(interval_iou(v.gt, est))
    if not per_video:
        raise EvalError(f"trial {trial}: every video failed")
    out = {f"sr@{g:g}": success_rate(pooled, g) for g in gammas}
    out.update(
        {
            "mae": mean_absolute_error(per_video),
            "mae_contact": float(np.mean([abs(c) for c, _ in per_video])),
            "mae_separation": float(np.mean([abs(s) for _, s in per_video])),
            "mof": float(np.mean(mofs)),
            "iou": float(np.mean(ious)),
            "failure_rate": failed / len(videos),
        }
    )
    return out


def aggregate(values: Seq[float]) -> tuple[float, float]:
    """Mean and population standard deviation across trials."""
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=0))


def _uniform_frames(window: SearchWindow, count: int) -> list[int]:
    raw = np.round(np.linspace(window.start, window.end, count)).astype(int)
    return [int(f) for f in raw]


def greedy_grid_side(n_frames: int, max_side: int = GREEDY_MAX_SIDE) -> int:
    """Side of the single greedy grid: ceil(sqrt(N)), capped for legibility.

    Uncapped, a 150-frame clip would need a 13x13 composite whose 169 tiles
    no practical prompt renders readably; the cap keeps the baseline's
    coarse-sweep character, with tile spacing N/side**2 frames.
    """
    return max(2, min(math.ceil(math.sqrt(n_frames)), max_side))


def baseline_greedy(
    seq: Sequence, backend: Backend, action_phrase: str = "Grasping the object",
    max_side: int = GREEDY_MAX_SIDE,
) -> EventEstimate:
    """One grid over the whole sequence, queried once per event.

    Frames fill the grid directly when they fit (trailing tiles blank);
    longer clips are covered uniformly, which floors the error at the tile
    spacing.
    """
    n = seq.n_frames
    side = greedy_grid_side(n, max_side)
    n_tiles = side * side
    if n <= n_tiles:
        frames: list[int | None] = list(range(n))
        frames += [None] * (n_tiles - n)
    else:
        frames = list(_uniform_frames(SearchWindow(0, n - 1), n_tiles))
    images = [None if f is None else seq.frames[f].rgb for f in frames]
    grid = compose_grid(images, frames, side)
    events = []
    for phase in ("started", "ended"):
        label = localize(
            LocalizeQuery(grid=grid, phase=phase, action_phrase=action_phrase), backend
        )
        events.append(grid.frame_for_label(label))
    return EventEstimate(contact=events[0], separation=events[1])


def _iterative_event(
    seq: Sequence, phase: str, backend: Backend, n_adj: int, action_phrase: str
) -> int:
    n_tiles = n_adj * n_adj
    lo, hi = 0, seq.n_frames - 1
    width = hi - lo + 1
    chosen = lo
    while True:
        frames = sorted(set(_uniform_frames(SearchWindow(lo, hi), min(n_tiles, width))))
        tiles: list[int | None] = list(frames)
        tiles += [None] * (n_tiles - len(frames))
        images = [None if f is None else seq.frames[f].rgb for f in tiles]
        grid = compose_grid(images, tiles, n_adj)
        label = localize(
            LocalizeQuery(grid=grid, phase=phase, action_phrase=action_phrase), backend
        )
        chosen = grid.frame_for_label(label)
        width = math.ceil(width / 2)
        if width <= n_tiles:
            return chosen
        half = width // 2
        lo = max(0, min(chosen - half, seq.n_frames - width))
        hi = lo + width - 1


def baseline_iterative(
    seq: Sequence, backend: Backend, n_adj: int = 2,
    action_phrase: str = "Grasping the object",
) -> EventEstimate:
    """Coarse-to-fine bisection, one event at a time over the full clip.

    Each iteration spreads n_adj**2 frames uniformly over the window, queries
    once, recenters on the answer, and halves the width (rounding up); when
    the halved width fits one grid the last answer is final without another
    query.
    """
    contact = _iterative_event(seq, "started", backend, n_adj, action_phrase)
    separation = _iterative_event(seq, "ended", backend, n_adj, action_phrase)
    return EventEstimate(contact=contact, separation=separation)


def _baseline_estimate(
    seq: Sequence, method: str, config: EngineConfig, backend: Backend
) -> EventEstimate:
    if method == "greedy":
        return baseline_greedy(seq, backend, config.action_phrase)
    return baseline_iterative(seq, backend, config.n_adj, config.action_phrase)


def _records_to_estimates(records: list[TrialRecord]) -> tuple[list, list]:
    estimates: list[EventEstimate | None] = []
    errors: list[str | None] = []
    for r in records:
        if r.result is None:
            estimates.append(None)
            errors.append(r.error)
        else:
            estimates.append(
                EventEstimate(r.result.contact.final, r.result.separation.final)
            )
            errors.append(None)
    return estimates, errors


def evaluate_video(
    seq: Sequence,
    method: str,
    config: EngineConfig,
    backend: Backend,
) -> VideoOutcome:
    """All trials of one method on one video.

    Baselines carry no randomness of their own, so their single estimate is
    replicated across trials; engine failures are captured per trial.
    """
    if seq.annotation is None:
        raise EvalError(f"{seq.source_dir}: evaluation needs ground-truth annotations")
    name = "?" if seq.source_dir is None else seq.source_dir.name
    if method == "egoloc":
        records = run_trials(seq, config, backend)
        estimates, errors = _records_to_estimates(records)
    elif method in ("greedy", "iterative"):
        try:
            est = _baseline_estimate(seq, method, config, backend)
            estimates = [est] * config.trials
            errors = [None] * config.trials
        except Exception as exc:  # noqa: BLE001 - mirror per-trial isolation
            estimates = [None] * config.trials
            errors = [str(exc)] * config.trials
    else:
        raise EvalError(f"unknown method: {method}")
    gt = EventEstimate(seq.annotation.contact_frame, seq.annotation.separation_frame)
    return VideoOutcome(
        video=name,
        n_frames=seq.n_frames,
        gt=gt,
        estimates=tuple(estimates),
        errors=tuple(errors),
    )


def method_rows(
    dataset: str,
    method: str,
    config: EngineConfig,
    videos: Seq[VideoOutcome],
) -> list[ReportRow]:
    per_trial = [trial_metrics(videos, t) for t in range(config.trials)]
    rows = []
    for metric in METRIC_ORDER:
        mean, std = aggregate([m[metric] for m in per_trial])
        rows.append(ReportRow(dataset, method, config.n_adj, metric, mean, std))
    return rows


def evaluate_manifest(
    manifest: Manifest,
    methods: Seq[str],
    config: EngineConfig,
    backend_factory: Callable[[Sequence], Backend],
    jobs: int = 1,
) -> dict:
    """Run every method over every manifest entry and aggregate.

    backend_factory builds one backend per sequence, which lets scripted
    oracles bind to each video's own ground truth.  Videos run in a thread
    pool of the given size; result assembly stays in manifest order.
    """
    if not manifest.entries:
        raise EmptyManifestError("manifest lists no sequences")
    sequences = [load_sequence(e.path) for e in manifest.entries]
    lock = threading.Lock()
    outcomes: dict[tuple[str, int], VideoOutcome] = {}

    def work(item: tuple[str, int]) -> None:
        method, idx = item
        seq = sequences[idx]
        out = evaluate_video(seq, method, config, backend_factory(seq))
        with lock:
            outcomes[item] = out

    items = [(m, i) for m in methods for i in range(len(sequences))]
    if jobs <= 1:
        for item in items:
            work(item)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(work, items))

    rows: list[ReportRow] = []
    for method in methods:
        videos = [outcomes[(method, i)] for i in range(len(sequences))]
        rows.extend(method_rows(manifest.dataset_name, method, config, videos))
    return {
        "schema": "til-eval/1",
        "tool_version": __version__,
        "dataset": manifest.dataset_name,
        "n_videos": len(sequences),
        "trials": config.trials,
        "methods": list(methods),
        "config": config_dict(config),
        "rows": [row.__dict__ for row in rows],
    }


def write_report(report: dict, out_dir: Path) -> tuple[Path, Path]:
    """report.json plus a CSV with one row per (method, metric)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    with open(json_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "method", "n_adj", "metric", "mean", "stddev"])
        for row in report["rows"]:
            writer.writerow(
                [row["dataset"], row["method"], row["n_adj"], row["metric"],
                 repr(row["mean"]), repr(row["stddev"])]
            )
    return json_path, csv_path
