"""Closed-loop contact/separation localization over one sequence.

Each phase runs: keyframe sampling -> grid query -> (optionally) a single
feedback round.  Feedback first checks the visual contact state of the
estimate; a failed check re-samples strictly after it.  If the visual state
holds, the estimate's speed must rank within the slowest mu_vel_percent of
the whole clip; otherwise re-sampling is constrained to strictly slower
frames.  Either re-sample yields one more grid query whose answer is final.
"""

from __future__ import annotations

import hashlib
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .hand_motion import IcpParams, MotionResult, SpeedProfile, compute_motion
from .sampler import (
    EmptyKeyframeSetError,
    GridSpec,
    SearchWindow,
    build_grid,
    dump_grid,
    sample_anchor,
    select_keyframes,
)
from .sequence_store import Sequence
from .vlm_gateway import (
    Backend,
    BackendConfig,
    CountingBackend,
    DiscriminateQuery,
    LocalizeQuery,
    discriminate,
    localize,
)


class EngineError(Exception):
    """Base for orchestration errors."""


class DegenerateResampleWarning(UserWarning):
    """Feedback demanded a re-sample no frame can satisfy; first answer kept."""


@dataclass(frozen=True)
class EngineConfig:
    n_adj: int = 2
    n_key: int = 4
    mu_vel_percent: float = 30.0
    feedback_rounds: int = 1
    stride: int = 1
    trials: int = 5
    seed: int = 0
    contact_window_fraction: float = 0.5
    use_2d_speeds: bool = False
    use_visual_discriminator: bool = True
    use_speed_discriminator: bool = True
    action_phrase: str = "Grasping the object"
    cloud_stride: int = 4
    motion_cache: bool = True
    backend: BackendConfig = field(default_factory=BackendConfig)
    icp: IcpParams = field(default_factory=IcpParams)

    def __post_init__(self) -> None:
        if self.feedback_rounds < 0:
            raise ValueError("feedback_rounds must be >= 0")
        if not (0 < self.mu_vel_percent <= 100):
            raise ValueError("mu_vel_percent must be in (0, 100]")
        if not (0 < self.contact_window_fraction <= 1):
            raise ValueError("contact_window_fraction must be in (0, 1]")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.n_key < 1:
            raise ValueError("n_key must be at least 1")


@dataclass
class GridAudit:
    """What one grid query saw and answered."""

    round_index: int
    anchor_frame: int
    anchor_tile: int
    chosen_label: int
    estimate: int
    tile_to_frame: dict[int, int]


@dataclass
class PhaseResult:
    phase: str  # "contact" | "separation"
    first_round: int
    visual_verdict: str  # "yes" | "no" | "skipped"
    speed_verdict: str  # "yes" | "no" | "skipped"
    second_round: int | None
    final: int
    degenerate_resample: bool
    grids: list[GridAudit] = field(default_factory=list)


@dataclass
class TILResult:
    contact: PhaseResult
    separation: PhaseResult
    seed: int
    backend_calls: int
    backend_calls_contact: int
    backend_calls_separation: int
    wall_time_s: float


@dataclass
class TrialRecord:
    trial_index: int
    seed: int
    result: TILResult | None = None
    error: str | None = None


def derive_trial_seed(seed: int, trial_index: int) -> int:
    digest = hashlib.sha256(f"{seed}:{trial_index}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def speed_rank_gate(speeds: np.ndarray, index: int, mu_vel_percent: float) -> bool:
    """True when speeds[index] ranks within the slowest mu_vel_percent.

    Ascending rank with ties sharing the lower rank: rank(v) = 1 + #{speeds
    strictly below v}; the gate passes iff rank <= ceil(mu/100 * N).
    """
    n = speeds.shape[0]
    allowed = math.ceil(mu_vel_percent / 100.0 * n)
    rank = 1 + int(np.count_nonzero(speeds < speeds[index]))
    return rank <= allowed


def _query_phase(phase: str) -> str:
    return "started" if phase == "contact" else "ended"


def _one_grid_round(
    seq: Sequence,
    profile: SpeedProfile,
    window: SearchWindow,
    phase: str,
    config: EngineConfig,
    backend: Backend,
    rng: np.random.Generator,
    round_index: int,
    max_speed: float | None,
    dump_dir: Path | None,
) -> GridAudit:
    keys = select_keyframes(profile, window, config.n_key, max_speed)
    anchor = sample_anchor(keys, rng)
    spec = GridSpec(n_adj=config.n_adj, stride=config.stride)
    grid = build_grid(seq, anchor, spec)
    if dump_dir is not None:
        dump_grid(grid, dump_dir, phase, round_index)
    label = localize(
        LocalizeQuery(grid=grid, phase=_query_phase(phase), action_phrase=config.action_phrase),
        backend,
    )
    raw = grid.frame_for_label(label)
    estimate = int(np.clip(raw, window.start, window.end))
    return GridAudit(
        round_index=round_index,
        anchor_frame=anchor,
        anchor_tile=grid.anchor_tile,
        chosen_label=label,
        estimate=estimate,
        tile_to_frame=dict(grid.tile_to_frame),
    )


def localize_phase(
    seq: Sequence,
    profile: SpeedProfile,
    window: SearchWindow,
    phase: str,
    config: EngineConfig,
    backend: Backend,
    rng: np.random.Generator,
    dump_dir: Path | None = None,
) -> PhaseResult:
    """One phase of the pipeline: sample, query, and (optionally) feed back.

    Estimates are clamped into the active window, so grids that were shifted
    against a sequence boundary cannot push the answer outside the phase's
    assumed range.
    """
    first = _one_grid_round(
        seq, profile, window, phase, config, backend, rng, 1, None, dump_dir
    )
    grids = [first]
    visual_verdict = "skipped"
    speed_verdict = "skipped"
    degenerate = False

    any_check = config.use_visual_discriminator or config.use_speed_discriminator
    for round_no in range(config.feedback_rounds if any_check else 0):
        current = grids[-1].estimate
        visual = "skipped"
        speed = "skipped"
        if config.use_visual_discriminator:
            in_contact = discriminate(
                DiscriminateQuery(image=seq.frames[current].rgb, frame_index=current),
                backend,
            )
            visual = "yes" if in_contact else "no"
        if visual != "no" and config.use_speed_discriminator:
            passed = speed_rank_gate(profile.speeds, current, config.mu_vel_percent)
            speed = "yes" if passed else "no"
        if round_no == 0:
            visual_verdict, speed_verdict = visual, speed
        if visual != "no" and speed != "no":
            break

        retry_window: SearchWindow | None = None
        max_speed: float | None = None
        if visual == "no":
            if current + 1 <= window.end:
                retry_window = SearchWindow(current + 1, window.end)
        else:
            retry_window = window
            max_speed = float(profile.speeds[current])
        if retry_window is None:
            degenerate = True
            break
        try:
            nxt = _one_grid_round(
                seq, profile, retry_window, phase, config, backend, rng,
                round_no + 2, max_speed, dump_dir,
            )
        except EmptyKeyframeSetError:
            degenerate = True
            break
        grids.append(nxt)

    if degenerate:
        warnings.warn(
            f"{phase}: feedback could not re-sample; keeping the standing estimate",
            DegenerateResampleWarning,
            stacklevel=2,
        )

    return PhaseResult(
        phase=phase,
        first_round=first.estimate,
        visual_verdict=visual_verdict,
        speed_verdict=speed_verdict,
        second_round=grids[1].estimate if len(grids) > 1 else None,
        final=grids[-1].estimate,
        degenerate_resample=degenerate,
        grids=grids,
    )


def contact_search_window(n_frames: int, fraction: float) -> SearchWindow:
    """First portion of the clip where contact is assumed to happen."""
    end = int(math.floor(n_frames * fraction)) - 1
    end = min(max(end, 1), n_frames - 2)
    return SearchWindow(0, end)


def run(
    seq: Sequence,
    config: EngineConfig,
    backend: Backend,
    motion: MotionResult | None = None,
    trial_seed: int | None = None,
    dump_dir: Path | None = None,
) -> TILResult:
    """Localize both events for one sequence with one random stream."""
    started = time.perf_counter()
    counting = CountingBackend(backend)
    seed = config.seed if trial_seed is None else trial_seed
    rng = np.random.default_rng(seed)
    if motion is None:
        motion = compute_motion(
            seq,
            use_2d=config.use_2d_speeds,
            cloud_stride=config.cloud_stride,
            icp_params=config.icp,
            cache=config.motion_cache,
        )
    profile = motion.profile
    n = seq.n_frames

    contact = localize_phase(
        seq, profile, contact_search_window(n, config.contact_window_fraction),
        "contact", config, counting, rng, dump_dir,
    )
    calls_contact = counting.total_calls

    separation = localize_phase(
        seq, profile, SearchWindow(contact.final + 1, n - 1),
        "separation", config, counting, rng, dump_dir,
    )
    calls_separation = counting.total_calls - calls_contact

    return TILResult(
        contact=contact,
        separation=separation,
        seed=seed,
        backend_calls=counting.total_calls,
        backend_calls_contact=calls_contact,
        backend_calls_separation=calls_separation,
        wall_time_s=time.perf_counter() - started,
    )


def run_trials(
    seq: Sequence,
    config: EngineConfig,
    backend: Backend,
    dump_dir: Path | None = None,
) -> list[TrialRecord]:
    """Independent trials with derived seeds; failures are recorded, not raised."""
    motion = compute_motion(
        seq,
        use_2d=config.use_2d_speeds,
        cloud_stride=config.cloud_stride,
        icp_params=config.icp,
        cache=config.motion_cache,
    )
    records: list[TrialRecord] = []
    for i in range(config.trials):
        trial_seed = derive_trial_seed(config.seed, i)
        trial_dump = None if dump_dir is None else Path(dump_dir) / f"trial_{i:03d}"
        try:
            result = run(
                seq, config, backend, motion=motion, trial_seed=trial_seed,
                dump_dir=trial_dump,
            )
            records.append(TrialRecord(trial_index=i, seed=trial_seed, result=result))
        except Exception as exc:  # noqa: BLE001 - per-trial isolation is the contract
            records.append(TrialRecord(trial_index=i, seed=trial_seed, error=str(exc)))
    return records


def _phase_dict(phase: PhaseResult) -> dict:
    return {
        "phase": phase.phase,
        "first_round": phase.first_round,
        "visual_verdict": phase.visual_verdict,
        "speed_verdict": phase.speed_verdict,
        "second_round": phase.second_round,
        "final": phase.final,
        "degenerate_resample": phase.degenerate_resample,
        "grids": [
            {
                "round": g.round_index,
                "anchor_frame": g.anchor_frame,
                "anchor_tile": g.anchor_tile,
                "chosen_label": g.chosen_label,
                "estimate": g.estimate,
                "tile_to_frame": {str(k): v for k, v in sorted(g.tile_to_frame.items())},
            }
            for g in phase.grids
        ],
    }


def config_dict(config: EngineConfig) -> dict:
    backend = config.backend
    return {
        "n_adj": config.n_adj,
        "n_key": config.n_key,
        "mu_vel_percent": config.mu_vel_percent,
        "feedback_rounds": config.feedback_rounds,
        "stride": config.stride,
        "trials": config.trials,
        "seed": config.seed,
        "contact_window_fraction": config.contact_window_fraction,
        "use_2d_speeds": config.use_2d_speeds,
        "use_visual_discriminator": config.use_visual_discriminator,
        "use_speed_discriminator": config.use_speed_discriminator,
        "action_phrase": config.action_phrase,
        "cloud_stride": config.cloud_stride,
        "motion_cache": config.motion_cache,
        "backend": {
            "kind": backend.kind,
            "endpoint": backend.endpoint,
            "model": backend.model,
            "api_key_env": backend.api_key_env,
            "timeout_s": backend.timeout_s,
            "max_retries": backend.max_retries,
            "temperature": backend.temperature,
            "max_in_flight": backend.max_in_flight,
        },
        "icp": {
            "voxel_size": config.icp.voxel_size,
            "max_iterations": config.icp.max_iterations,
            "convergence_tol": config.icp.convergence_tol,
            "divergence_residual": config.icp.divergence_residual,
        },
    }


def result_payload(seq: Sequence, config: EngineConfig, records: list[TrialRecord]) -> dict:
    """Deterministic result document; wall times live in a separate file."""
    trials = []
    for record in records:
        entry: dict = {"trial": record.trial_index, "seed": record.seed}
        if record.result is None:
            entry["status"] = "error"
            entry["error"] = record.error
        else:
            entry["status"] = "ok"
            entry["backend_calls"] = record.result.backend_calls
            entry["backend_calls_contact"] = record.result.backend_calls_contact
            entry["backend_calls_separation"] = record.result.backend_calls_separation
            entry["contact"] = _phase_dict(record.result.contact)
            entry["separation"] = _phase_dict(record.result.separation)
        trials.append(entry)
    return {
        "schema": "til-result/1",
        "tool_version": __version__,
        "sequence": None if seq.source_dir is None else seq.source_dir.name,
        "n_frames": seq.n_frames,
        "config": config_dict(config),
        "trials": trials,
    }


def write_result_json(path: Path, seq: Sequence, config: EngineConfig,
                      records: list[TrialRecord]) -> None:
    import json

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(result_payload(seq, config, records), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_timings_json(path: Path, records: list[TrialRecord], total_s: float) -> None:
    import json

    payload = {
        "total_s": total_s,
        "per_trial_s": [
            None if r.result is None else r.result.wall_time_s for r in records
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
