"""Vision-language backend abstraction for localization and discrimination.

All backends return raw text replies; parsing is uniform on this side of the
boundary.  Available backends: an HTTP chat-completions client, a scripted
oracle for hermetic tests (answers derived from ground truth with
configurable error rates), and a transcript replayer.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import cv2
import numpy as np

from .sampler import GridImage, encode_grid_png
from .sequence_store import GroundTruth


class GatewayError(Exception):
    """Base for backend and answer-parsing errors."""


class BackendUnavailableError(GatewayError):
    """Transport failed after retries, or a replay transcript ran dry."""


class UnparseableAnswerError(GatewayError):
    """No integer / verdict token found in the reply after retries."""


class OutOfRangeAnswerError(GatewayError):
    """Reply named a tile outside [1, n_tiles] after retries."""


@dataclass(frozen=True)
class LocalizeQuery:
    """Ask which tile is closest to the start or end of the grasp."""

    grid: GridImage
    phase: str  # "started" | "ended"
    action_phrase: str = "Grasping the object"

    def __post_init__(self) -> None:
        if self.phase not in ("started", "ended"):
            raise ValueError(f"phase must be 'started' or 'ended', got {self.phase!r}")


@dataclass(frozen=True)
class DiscriminateQuery:
    """Ask whether hand and object are in contact in a single frame."""

    image: np.ndarray
    frame_index: int


@dataclass(frozen=True)
class OracleNoise:
    """Error model for the scripted oracle.

    With probability p_loc the localization answer shifts by a nonzero
    offset of at most loc_offset_range tiles; with probability p_disc the
    contact verdict inverts.  Draws come from substreams keyed by
    (seed, query hash), so identical queries always get identical answers.
    """

    p_loc: float = 0.0
    loc_offset_range: int = 2
    p_disc: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0 <= self.p_loc <= 1 and 0 <= self.p_disc <= 1):
            raise ValueError("noise probabilities must be in [0, 1]")
        if self.loc_offset_range < 1:
            raise ValueError("loc_offset_range must be at least 1")


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "scripted"  # "http" | "scripted" | "replay"
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    timeout_s: float = 60.0
    max_retries: int = 2
    temperature: float = 0.0
    max_in_flight: int = 4
    transcript_path: str = ""

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")


def localize_prompt(query: LocalizeQuery) -> str:
    return (
        f"Choose the number that is closest to the moment when "
        f"'{query.action_phrase}' {query.phase}"
    )


def discriminate_prompt() -> str:
    return (
        "Determine whether the hand and the object are in obvious contact "
        "rather than separation"
    )


class Backend(Protocol):
    def answer_localize(self, query: LocalizeQuery, prompt: str, image_png: bytes) -> str: ...

    def answer_discriminate(
        self, query: DiscriminateQuery, prompt: str, image_png: bytes
    ) -> str: ...


def parse_tile_label(reply: str, n_tiles: int) -> int:
    """First integer token in the reply, validated against [1, n_tiles]."""
    match = re.search(r"\d+", reply)
    if match is None:
        raise UnparseableAnswerError(f"no integer in reply: {reply!r}")
    label = int(match.group())
    if not (1 <= label <= n_tiles):
        raise OutOfRangeAnswerError(f"tile {label} outside [1, {n_tiles}]")
    return label


def parse_verdict(reply: str) -> bool:
    """First standalone yes/no token, case-insensitive."""
    match = re.search(r"\b(yes|no)\b", reply, re.IGNORECASE)
    if match is None:
        raise UnparseableAnswerError(f"no yes/no in reply: {reply!r}")
    return match.group(1).lower() == "yes"


def _digest(png: bytes) -> str:
    return hashlib.sha256(png).hexdigest()


class TranscriptWriter:
    """Appends one JSON line per backend exchange."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, entry: dict) -> None:
        with self._lock, open(self.path, "a") as fh:
            json.dump(entry, fh, sort_keys=True)
            fh.write("\n")


def _record(backend, kind: str, prompt: str, png: bytes, raw: str, parsed) -> None:
    writer = getattr(backend, "transcript", None)
    if writer is not None:
        writer.append(
            {
                "query_kind": kind,
                "prompt": prompt,
                "image_digest": _digest(png),
                "raw_reply": raw,
                "parsed": parsed,
            }
        )


def encode_frame_png(image: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", image[:, :, ::-1])
    if not ok:
        raise GatewayError("PNG encoding failed")
    return buf.tobytes()


def _retries(backend, max_retries: int | None) -> int:
    if max_retries is not None:
        return max_retries
    return int(getattr(backend, "max_retries", 0))


def localize(query: LocalizeQuery, backend: Backend, max_retries: int | None = None) -> int:
    """Resolve a localize query to a validated tile label.

    Parse failures (no integer, out-of-range integer) re-request up to the
    retry budget, then surface the final error.
    """
    prompt = localize_prompt(query)
    png = encode_grid_png(query.grid)
    attempts = _retries(backend, max_retries) + 1
    last_error: GatewayError | None = None
    for _ in range(attempts):
        raw = backend.answer_localize(query, prompt, png)
        try:
            label = parse_tile_label(raw, query.grid.n_tiles)
        except (UnparseableAnswerError, OutOfRangeAnswerError) as exc:
            _record(backend, "localize", prompt, png, raw, None)
            last_error = exc
            continue
        _record(backend, "localize", prompt, png, raw, label)
        return label
    assert last_error is not None
    raise last_error


def discriminate(
    query: DiscriminateQuery, backend: Backend, max_retries: int | None = None
) -> bool:
    """Resolve a contact-state query to True (contact) or False (separation)."""
    prompt = discriminate_prompt()
    png = encode_frame_png(query.image)
    attempts = _retries(backend, max_retries) + 1
    last_error: GatewayError | None = None
    for _ in range(attempts):
        raw = backend.answer_discriminate(query, prompt, png)
        try:
            verdict = parse_verdict(raw)
        except UnparseableAnswerError as exc:
            _record(backend, "discriminate", prompt, png, raw, None)
            last_error = exc
            continue
        _record(backend, "discriminate", prompt, png, raw, "yes" if verdict else "no")
        return verdict
    assert last_error is not None
    raise last_error


class HttpBackend:
    """Chat-completions-style JSON client; images travel as base64 PNG.

    The API key is read from the environment variable named in the config,
    never from flags or files.  Transport failures and 5xx/429 replies retry
    with exponential backoff before raising BackendUnavailableError.
    """

    def __init__(self, config: BackendConfig):
        import os

        import requests

        self.config = config
        self.max_retries = config.max_retries
        self._session = requests.Session()
        self._semaphore = threading.Semaphore(config.max_in_flight)
        self._key = os.environ.get(config.api_key_env, "")
        if not self._key:
            raise BackendUnavailableError(
                f"environment variable {config.api_key_env} is not set"
            )
        self.transcript = (
            TranscriptWriter(config.transcript_path) if config.transcript_path else None
        )

    def _request(self, prompt: str, image_png: bytes) -> str:
        import requests

        payload = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt},
                        {
                            "type": "image_url",
                            "image_url": {
                                "url": "data:image/png;base64,"
                                + base64.b64encode(image_png).decode()
                            },
                        },
                    ],
                }
            ],
        }
        headers = {"Authorization": f"Bearer {self._key}"}
        last_err: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            try:
                with self._semaphore:
                    resp = self._session.post(
                        self.config.endpoint,
                        json=payload,
                        headers=headers,
                        timeout=self.config.timeout_s,
                    )
                if resp.status_code in (429,) or resp.status_code >= 500:
                    raise BackendUnavailableError(f"HTTP {resp.status_code}")
                resp.raise_for_status()
                body = resp.json()
                return body["choices"][0]["message"]["content"]
            except (requests.RequestException, BackendUnavailableError, KeyError) as exc:
                last_err = exc
                if attempt < self.config.max_retries:
                    time.sleep(0.5 * 2**attempt)
        raise BackendUnavailableError(f"backend unreachable: {last_err}")

    def answer_localize(self, query: LocalizeQuery, prompt: str, image_png: bytes) -> str:
        return self._request(prompt, image_png)

    def answer_discriminate(
        self, query: DiscriminateQuery, prompt: str, image_png: bytes
    ) -> str:
        return self._request(prompt, image_png)


class ScriptedOracleBackend:
    """Ground-truth-driven backend for hermetic runs.

    Localization answers the tile whose frame is nearest the queried event
    (ties to the lower label); discrimination answers whether the frame lies
    inside the annotated contact interval.  Errors are injected per the
    noise model, deterministically per query.
    """

    max_retries = 0

    def __init__(self, gt: GroundTruth, noise: OracleNoise = OracleNoise()):
        self.gt = gt
        self.noise = noise
        self.transcript = None

    def _rng(self, *key_parts) -> np.random.Generator:
        material = json.dumps([self.noise.seed, *key_parts], sort_keys=True).encode()
        digest = hashlib.sha256(material).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "big"))

    def answer_localize(self, query: LocalizeQuery, prompt: str, image_png: bytes) -> str:
        target = (
            self.gt.contact_frame if query.phase == "started" else self.gt.separation_frame
        )
        tiles = query.grid.tile_to_frame
        best = min(tiles, key=lambda label: (abs(tiles[label] - target), label))
        rng = self._rng("localize", prompt, sorted(tiles.items()))
        label = best
        if self.noise.p_loc > 0 and rng.random() < self.noise.p_loc:
            r = self.noise.loc_offset_range
            offsets = [o for o in range(-r, r + 1) if o != 0]
            shifted = best + int(rng.choice(offsets))
            label = int(np.clip(shifted, 1, query.grid.n_tiles))
            if label not in tiles:
                label = min(tiles, key=lambda lb: (abs(lb - label), lb))
        return f"The answer is {label}."

    def answer_discriminate(
        self, query: DiscriminateQuery, prompt: str, image_png: bytes
    ) -> str:
        truth = self.gt.contact_frame <= query.frame_index <= self.gt.separation_frame
        rng = self._rng("discriminate", prompt, query.frame_index)
        if self.noise.p_disc > 0 and rng.random() < self.noise.p_disc:
            truth = not truth
        return "Yes." if truth else "No."


def make_scripted_oracle(gt: GroundTruth, noise: OracleNoise = OracleNoise()) -> ScriptedOracleBackend:
    return ScriptedOracleBackend(gt, noise)


class ReplayBackend:
    """Serves raw replies recorded in a transcript, FIFO per query identity."""

    max_retries = 0

    def __init__(self, transcript_path: Path | str):
        self.transcript = None
        self._queues: dict[tuple[str, str, str], list[str]] = {}
        path = Path(transcript_path)
        if not path.is_file():
            raise BackendUnavailableError(f"missing transcript: {path}")
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            key = (entry["query_kind"], entry["prompt"], entry["image_digest"])
            self._queues.setdefault(key, []).append(entry["raw_reply"])

    def _pop(self, kind: str, prompt: str, png: bytes) -> str:
        key = (kind, prompt, _digest(png))
        queue = self._queues.get(key)
        if not queue:
            raise BackendUnavailableError(f"transcript has no reply for {kind} query")
        return queue.pop(0)

    def answer_localize(self, query: LocalizeQuery, prompt: str, image_png: bytes) -> str:
        return self._pop("localize", prompt, image_png)

    def answer_discriminate(
        self, query: DiscriminateQuery, prompt: str, image_png: bytes
    ) -> str:
        return self._pop("discriminate", prompt, image_png)


class CountingBackend:
    """Wrapper that tallies calls per query kind; used for budget checks."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.localize_calls = 0
        self.discriminate_calls = 0
        self.max_retries = getattr(inner, "max_retries", 0)

    @property
    def transcript(self):
        return getattr(self.inner, "transcript", None)

    @property
    def total_calls(self) -> int:
        return self.localize_calls + self.discriminate_calls

    def answer_localize(self, query: LocalizeQuery, prompt: str, image_png: bytes) -> str:
        self.localize_calls += 1
        return self.inner.answer_localize(query, prompt, image_png)

    def answer_discriminate(
        self, query: DiscriminateQuery, prompt: str, image_png: bytes
    ) -> str:
        self.discriminate_calls += 1
        return self.inner.answer_discriminate(query, prompt, image_png)
