"""Command-line entry points: run one sequence, evaluate a manifest, synthesize data.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  API keys are never
accepted as flags; the http backend reads the environment variable named by
--api-key-env.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import Callable

from . import __version__
from .hand_motion import HandMotionError
from .metrics_eval import EvalError, evaluate_manifest, write_report
from .sampler import SamplerError
from .sequence_store import Sequence, SequenceStoreError, load_manifest, load_sequence
from .synth import CorpusRanges, SynthConfig, SynthError, generate_corpus, generate_sequence
from .til_engine import (
    EngineConfig,
    EngineError,
    run_trials,
    write_result_json,
    write_timings_json,
)
from .vlm_gateway import (
    Backend,
    BackendConfig,
    GatewayError,
    HttpBackend,
    OracleNoise,
    ReplayBackend,
    TranscriptWriter,
    make_scripted_oracle,
)

_CONFIG_TYPES: dict[str, Callable[[str], object]] = {}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def load_config_file(path: Path) -> dict[str, object]:
    """Flat key=value defaults; keys use flag names with underscores."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        conv = _CONFIG_TYPES.get(key)
        if conv is None:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = conv(value)
    return values


def _opt(parser: argparse.ArgumentParser, flag: str, conv, **kwargs) -> None:
    """Add an option and register its config-file converter."""
    dest = flag.lstrip("-").replace("-", "_")
    _CONFIG_TYPES[dest] = conv
    if kwargs.pop("bool_flag", False):
        parser.add_argument(flag, action=argparse.BooleanOptionalAction, **kwargs)
    else:
        parser.add_argument(flag, type=conv, **kwargs)


def _add_engine_flags(parser: argparse.ArgumentParser) -> None:
    _opt(parser, "--n-adj", int, default=2, help="grid side; each query shows n_adj**2 tiles")
    _opt(parser, "--n-key", int, default=4, help="lowest-speed keyframes per sampling round")
    _opt(parser, "--mu-vel", float, default=30.0,
         help="speed check passes when the estimate ranks in the slowest mu-vel %% of frames")
    _opt(parser, "--stride", int, default=1, help="frame spacing inside a grid")
    _opt(parser, "--trials", int, default=5, help="independent runs with derived seeds")
    _opt(parser, "--seed", int, default=0, help="base seed for anchor sampling")
    _opt(parser, "--feedback-rounds", int, default=1,
         help="corrective rounds after the first estimate; 0 disables feedback")
    _opt(parser, "--contact-window-fraction", float, default=0.5,
         help="portion of the clip searched for contact")
    _opt(parser, "--use-2d-speeds", _parse_bool, bool_flag=True, default=False,
         help="rank keyframes by pixel-space centroid speed instead of 3D")
    _opt(parser, "--visual-discriminator", _parse_bool, bool_flag=True, default=True,
         help="check the estimate's contact state before accepting it")
    _opt(parser, "--speed-discriminator", _parse_bool, bool_flag=True, default=True,
         help="check the estimate's speed rank before accepting it")
    _opt(parser, "--motion-cache", _parse_bool, bool_flag=True, default=True,
         help="reuse motion.json stored next to the sequence")
    _opt(parser, "--cloud-stride", int, default=4, help="pixel stride when lifting depth to points")
    _opt(parser, "--action-phrase", str, default="Grasping the object",
         help="action text inserted into localization prompts")


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--backend", choices=("http", "scripted", "replay"),
                        default="scripted")
    _CONFIG_TYPES["backend"] = str
    _opt(parser, "--endpoint", str, default="", help="chat-completions URL for --backend http")
    _opt(parser, "--model", str, default="", help="model name sent to the http backend")
    _opt(parser, "--api-key-env", str, default="OPENAI_API_KEY",
         help="environment variable holding the API key (never pass the key itself)")
    _opt(parser, "--timeout", float, default=60.0, help="per-request timeout, seconds")
    _opt(parser, "--max-retries", int, default=2, help="re-requests after transport or parse failures")
    _opt(parser, "--max-in-flight", int, default=4, help="concurrent http requests cap")
    _opt(parser, "--transcript", str, default="",
         help="JSONL file recording every prompt/reply exchange")
    _opt(parser, "--replay-transcript", str, default="",
         help="transcript consumed by --backend replay")
    _opt(parser, "--oracle-p-loc", float, default=0.0,
         help="scripted oracle: probability a localization answer is shifted")
    _opt(parser, "--oracle-loc-offset", int, default=2,
         help="scripted oracle: maximum tile shift magnitude")
    _opt(parser, "--oracle-p-disc", float, default=0.0,
         help="scripted oracle: probability a contact verdict flips")
    _opt(parser, "--oracle-seed", int, default=0, help="scripted oracle noise seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tiloc",
        description="Zero-shot localization of hand-object contact and separation.",
    )
    parser.add_argument("--version", action="version", version=f"tiloc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="localize both events for one sequence")
    run.add_argument("--seq", required=True, help="sequence directory")
    run.add_argument("--out", required=True, help="output directory for result.json")
    run.add_argument("--config", help="key=value defaults file; flags win")
    run.add_argument("--dump-grids", action="store_true",
                     help="write every queried grid under <out>/grids/")
    _add_engine_flags(run)
    _add_backend_flags(run)

    ev = sub.add_parser("eval", help="run methods over a manifest and report metrics")
    ev.add_argument("--manifest", required=True, help="manifest.txt listing sequences")
    ev.add_argument("--out", required=True, help="output directory for report.json/csv")
    ev.add_argument("--config", help="key=value defaults file; flags win")
    ev.add_argument("--method", action="append", choices=("egoloc", "greedy", "iterative"),
                    help="repeatable; default: egoloc iterative greedy")
    ev.add_argument("--jobs", type=int, default=1, help="videos evaluated in parallel")
    _CONFIG_TYPES["jobs"] = int
    _add_engine_flags(ev)
    _add_backend_flags(ev)

    synth = sub.add_parser("synth", help="render synthetic annotated sequences")
    synth.add_argument("--out", required=True, help="target directory")
    synth.add_argument("--count", type=int, default=1,
                       help="1 writes a single sequence; more writes a corpus + manifest")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--n-frames", type=int, default=150)
    synth.add_argument("--fps", type=float, default=30.0)
    synth.add_argument("--contact", type=int, help="contact frame (single sequence only)")
    synth.add_argument("--separation", type=int, help="separation frame (single sequence only)")
    synth.add_argument("--width", type=int, default=128)
    synth.add_argument("--height", type=int, default=96)
    synth.add_argument("--speed-noise", type=float, default=0.0,
                       help="sigma of hand position noise, meters")
    synth.add_argument("--camera-motion", type=float, default=0.0,
                       help="amplitude of sinusoidal camera motion, 0..1")
    synth.add_argument("--mask-jitter", type=float, default=0.0,
                       help="sigma of mask misalignment, pixels")
    return parser


def _engine_config(args: argparse.Namespace) -> EngineConfig:
    backend = BackendConfig(
        kind=args.backend,
        endpoint=args.endpoint,
        model=args.model,
        api_key_env=args.api_key_env,
        timeout_s=args.timeout,
        max_retries=args.max_retries,
        max_in_flight=args.max_in_flight,
        transcript_path=args.transcript,
    )
    return EngineConfig(
        n_adj=args.n_adj,
        n_key=args.n_key,
        mu_vel_percent=args.mu_vel,
        feedback_rounds=args.feedback_rounds,
        stride=args.stride,
        trials=args.trials,
        seed=args.seed,
        contact_window_fraction=args.contact_window_fraction,
        use_2d_speeds=args.use_2d_speeds,
        use_visual_discriminator=args.visual_discriminator,
        use_speed_discriminator=args.speed_discriminator,
        action_phrase=args.action_phrase,
        cloud_stride=args.cloud_stride,
        motion_cache=args.motion_cache,
        backend=backend,
    )


def _backend_factory(args: argparse.Namespace) -> Callable[[Sequence], Backend]:
    transcript = TranscriptWriter(args.transcript) if args.transcript else None
    if args.backend == "http":
        http = HttpBackend(
            BackendConfig(
                kind="http", endpoint=args.endpoint, model=args.model,
                api_key_env=args.api_key_env, timeout_s=args.timeout,
                max_retries=args.max_retries, max_in_flight=args.max_in_flight,
            )
        )
        http.transcript = transcript
        return lambda seq: http
    if args.backend == "replay":
        source = args.replay_transcript or args.transcript
        if not source:
            raise EvalError("--backend replay needs --replay-transcript")
        replay = ReplayBackend(source)
        return lambda seq: replay
    noise = OracleNoise(
        p_loc=args.oracle_p_loc,
        loc_offset_range=args.oracle_loc_offset,
        p_disc=args.oracle_p_disc,
        seed=args.oracle_seed,
    )

    def scripted(seq: Sequence) -> Backend:
        if seq.annotation is None:
            raise EvalError(
                f"{seq.source_dir}: scripted backend needs annotated ground truth"
            )
        oracle = make_scripted_oracle(seq.annotation, noise)
        oracle.transcript = transcript
        return oracle

    return scripted


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Pre-scan --config and install its values as parser defaults."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if known.config:
        defaults = load_config_file(Path(known.config))
        for action in parser._subparsers._group_actions[0].choices.values():  # noqa: SLF001
            usable = {k: v for k, v in defaults.items()
                      if any(a.dest == k for a in action._actions)}  # noqa: SLF001
            action.set_defaults(**usable)
    return argv


def _cmd_run(args: argparse.Namespace) -> int:
    seq = load_sequence(args.seq)
    config = _engine_config(args)
    backend = _backend_factory(args)(seq)
    out = Path(args.out)
    dump_dir = out / "grids" if args.dump_grids else None
    started = time.perf_counter()
    records = run_trials(seq, config, backend, dump_dir=dump_dir)
    write_result_json(out / "result.json", seq, config, records)
    write_timings_json(out / "timings.json", records, time.perf_counter() - started)
    ok = sum(1 for r in records if r.result is not None)
    for r in records:
        if r.result is not None:
            print(
                f"trial {r.trial_index}: contact={r.result.contact.final} "
                f"separation={r.result.separation.final} calls={r.result.backend_calls}"
            )
        else:
            print(f"trial {r.trial_index}: FAILED: {r.error}", file=sys.stderr)
    print(f"wrote {out / 'result.json'} ({ok}/{len(records)} trials ok)")
    return 0 if ok else 1


def _cmd_eval(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    methods = args.method or ["egoloc", "iterative", "greedy"]
    config = _engine_config(args)
    factory = _backend_factory(args)
    report = evaluate_manifest(manifest, methods, config, factory, jobs=args.jobs)
    json_path, csv_path = write_report(report, Path(args.out))
    for row in report["rows"]:
        print(
            f"{row['dataset']}\t{row['method']}\t{row['metric']}\t"
            f"{row['mean']:.4f} +/- {row['stddev']:.4f}"
        )
    print(f"wrote {json_path} and {csv_path}")
    return 0


def _default_timing(n_frames: int) -> tuple[int, int]:
    if n_frames == 150:
        return 40, 105
    contact = max(1, round(0.27 * n_frames))
    separation = min(n_frames - 2, round(0.70 * n_frames))
    return contact, separation


def _cmd_synth(args: argparse.Namespace) -> int:
    if args.count < 1:
        print("error: --count must be at least 1", file=sys.stderr)
        return 2
    out = Path(args.out)
    if args.count > 1:
        ranges = CorpusRanges(
            n_frames=args.n_frames,
            fps=args.fps,
            speed_noise_sigma=args.speed_noise,
            camera_motion_amplitude=args.camera_motion,
            mask_jitter=args.mask_jitter,
        )
        manifest = generate_corpus(args.count, out, ranges, seed=args.seed)
        print(f"wrote {len(manifest.entries)} sequences under {out}")
        return 0
    default_c, default_s = _default_timing(args.n_frames)
    cfg = SynthConfig(
        n_frames=args.n_frames,
        fps=args.fps,
        contact_frame=args.contact if args.contact is not None else default_c,
        separation_frame=args.separation if args.separation is not None else default_s,
        width=args.width,
        height=args.height,
        speed_noise_sigma=args.speed_noise,
        camera_motion_amplitude=args.camera_motion,
        mask_jitter=args.mask_jitter,
        seed=args.seed,
    )
    seq = generate_sequence(cfg, out)
    print(
        f"wrote {seq.n_frames} frames to {out} "
        f"(contact={cfg.contact_frame}, separation={cfg.separation_frame})"
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _apply_config_file(parser, argv)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    handlers = {"run": _cmd_run, "eval": _cmd_eval, "synth": _cmd_synth}
    try:
        return handlers[args.command](args)
    except (SequenceStoreError, HandMotionError, SamplerError, GatewayError,
            EngineError, EvalError, SynthError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
