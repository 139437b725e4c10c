"""Prompt construction, reply parsing, backends, and retry handling."""
from __future__ import annotations

import json
import time

import numpy as np
import pytest

from tiloc.sampler import GridImage
from tiloc.sequence_store import GroundTruth
from tiloc.vlm_gateway import (
    BackendConfig,
    BackendUnavailableError,
    CountingBackend,
    DiscriminateQuery,
    HttpBackend,
    LocalizeQuery,
    OracleNoise,
    OutOfRangeAnswerError,
    ReplayBackend,
    ScriptedOracleBackend,
    TranscriptWriter,
    UnparseableAnswerError,
    discriminate,
    discriminate_prompt,
    localize,
    localize_prompt,
    parse_tile_label,
    parse_verdict,
)


def _grid(tile_to_frame: dict[int, int], n_tiles: int = 4, anchor_tile: int = 2) -> GridImage:
    return GridImage(
        image=np.zeros((16, 16, 3), dtype=np.uint8),
        tile_to_frame=tile_to_frame,
        anchor_tile=anchor_tile,
        n_tiles=n_tiles,
    )


class _StubBackend:
    """Plays back canned replies and counts raw calls."""

    def __init__(self, loc=(), disc=(), max_retries=0):
        self.loc = list(loc)
        self.disc = list(disc)
        self.max_retries = max_retries
        self.transcript = None
        self.calls = 0

    def answer_localize(self, query, prompt, image_png):
        self.calls += 1
        return self.loc.pop(0)

    def answer_discriminate(self, query, prompt, image_png):
        self.calls += 1
        return self.disc.pop(0)


# --- prompts ---


def test_localize_prompt_wording():
    q = LocalizeQuery(grid=_grid({1: 0, 2: 1}), phase="started")
    assert localize_prompt(q) == (
        "Choose the number that is closest to the moment when "
        "'Grasping the object' started"
    )
    q2 = LocalizeQuery(grid=_grid({1: 0, 2: 1}), phase="ended",
                       action_phrase="Pouring water")
    assert localize_prompt(q2).endswith("'Pouring water' ended")


def test_discriminate_prompt_wording():
    assert discriminate_prompt() == (
        "Determine whether the hand and the object are in obvious contact "
        "rather than separation"
    )


def test_localize_query_validates_phase():
    with pytest.raises(ValueError):
        LocalizeQuery(grid=_grid({1: 0}), phase="begins")


# --- parsing ---


def test_parse_tile_label_examples():
    assert parse_tile_label("The answer is 5.", n_tiles=9) == 5
    assert parse_tile_label("Tile 3, though 9 is close.", n_tiles=9) == 3
    with pytest.raises(OutOfRangeAnswerError):
        parse_tile_label("12", n_tiles=9)
    with pytest.raises(UnparseableAnswerError):
        parse_tile_label("I think none of them.", n_tiles=9)


def test_parse_tile_label_every_label():
    for k in range(1, 17):
        assert parse_tile_label(f"It must be {k}!", n_tiles=16) == k


def test_parse_verdict_examples():
    assert parse_verdict("No, the hand hovers above the cup.") is False
    assert parse_verdict("YES!") is True
    assert parse_verdict("no but arguably yes") is False  # first token wins
    with pytest.raises(UnparseableAnswerError):
        parse_verdict("unclear")
    with pytest.raises(UnparseableAnswerError):
        parse_verdict("nothing to say")  # 'no' must be a standalone word


# --- config validation ---


def test_oracle_noise_validation():
    with pytest.raises(ValueError):
        OracleNoise(p_loc=1.5)
    with pytest.raises(ValueError):
        OracleNoise(p_disc=-0.1)
    with pytest.raises(ValueError):
        OracleNoise(loc_offset_range=0)


def test_backend_config_validation():
    with pytest.raises(ValueError):
        BackendConfig(max_retries=-1)
    with pytest.raises(ValueError):
        BackendConfig(timeout_s=0.0)


# --- scripted oracle ---


def test_oracle_localize_nearest_tile():
    gt = GroundTruth(22, 60)
    oracle = ScriptedOracleBackend(gt)
    grid = _grid({1: 10, 2: 20, 3: 30, 4: 40})
    q = LocalizeQuery(grid=grid, phase="started")
    assert localize(q, oracle) == 2
    # equidistant frames resolve to the lower label
    oracle_tie = ScriptedOracleBackend(GroundTruth(25, 60))
    assert localize(q, oracle_tie) == 2


def test_oracle_localize_targets_separation_for_ended():
    oracle = ScriptedOracleBackend(GroundTruth(5, 38))
    grid = _grid({1: 10, 2: 20, 3: 30, 4: 40})
    assert localize(LocalizeQuery(grid=grid, phase="ended"), oracle) == 4


def test_oracle_discriminate_truth_window():
    oracle = ScriptedOracleBackend(GroundTruth(10, 20))
    img = np.zeros((4, 4, 3), dtype=np.uint8)
    assert discriminate(DiscriminateQuery(image=img, frame_index=10), oracle) is True
    assert discriminate(DiscriminateQuery(image=img, frame_index=20), oracle) is True
    assert discriminate(DiscriminateQuery(image=img, frame_index=9), oracle) is False
    assert discriminate(DiscriminateQuery(image=img, frame_index=21), oracle) is False


def test_oracle_discriminate_full_noise_inverts():
    noise = OracleNoise(p_disc=1.0, seed=3)
    oracle = ScriptedOracleBackend(GroundTruth(10, 20), noise)
    img = np.zeros((4, 4, 3), dtype=np.uint8)
    assert discriminate(DiscriminateQuery(image=img, frame_index=15), oracle) is False
    assert discriminate(DiscriminateQuery(image=img, frame_index=25), oracle) is True


def test_oracle_noise_is_deterministic_per_query():
    noise = OracleNoise(p_loc=0.5, loc_offset_range=2, seed=17)
    grid = _grid({1: 10, 2: 20, 3: 30, 4: 40})
    q = LocalizeQuery(grid=grid, phase="started")
    a = localize(q, ScriptedOracleBackend(GroundTruth(22, 60), noise))
    b = localize(q, ScriptedOracleBackend(GroundTruth(22, 60), noise))
    assert a == b


def test_oracle_noisy_label_stays_in_range():
    noise = OracleNoise(p_loc=1.0, loc_offset_range=2, seed=1)
    grid = _grid({1: 10, 2: 20, 3: 30, 4: 40})
    for phase in ("started", "ended"):
        for seed in range(20):
            oracle = ScriptedOracleBackend(
                GroundTruth(12, 38), OracleNoise(p_loc=1.0, loc_offset_range=2, seed=seed)
            )
            label = localize(LocalizeQuery(grid=grid, phase=phase), oracle)
            assert 1 <= label <= 4


def test_localize_happy_path_single_call():
    counting = CountingBackend(ScriptedOracleBackend(GroundTruth(1, 3)))
    grid = _grid({1: 0, 2: 1, 3: 2, 4: 3})
    localize(LocalizeQuery(grid=grid, phase="started"), counting)
    assert counting.localize_calls == 1
    assert counting.total_calls == 1


# --- retry budget ---


def test_localize_retries_parse_failures():
    backend = _StubBackend(loc=["hmm", "The answer is 2."], max_retries=2)
    grid = _grid({1: 0, 2: 1, 3: 2, 4: 3})
    assert localize(LocalizeQuery(grid=grid, phase="started"), backend) == 2
    assert backend.calls == 2


def test_localize_retry_budget_exhausted():
    backend = _StubBackend(loc=["nope", "still nope", "99"], max_retries=2)
    grid = _grid({1: 0, 2: 1, 3: 2, 4: 3})
    with pytest.raises(OutOfRangeAnswerError):
        localize(LocalizeQuery(grid=grid, phase="started"), backend)
    assert backend.calls == 3  # initial attempt plus two retries


def test_discriminate_retries_then_succeeds():
    backend = _StubBackend(disc=["???", "no."], max_retries=1)
    q = DiscriminateQuery(image=np.zeros((4, 4, 3), dtype=np.uint8), frame_index=0)
    assert discriminate(q, backend) is False
    assert backend.calls == 2


# --- transcripts and replay ---


def test_transcript_records_and_replay_reproduces(tmp_path):
    path = tmp_path / "transcript.jsonl"
    oracle = ScriptedOracleBackend(GroundTruth(12, 38))
    oracle.transcript = TranscriptWriter(path)
    grid = _grid({1: 10, 2: 20, 3: 30, 4: 40})
    q = LocalizeQuery(grid=grid, phase="started")
    dq = DiscriminateQuery(image=np.zeros((4, 4, 3), dtype=np.uint8), frame_index=15)
    first = localize(q, oracle)
    verdict = discriminate(dq, oracle)

    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert [e["query_kind"] for e in lines] == ["localize", "discriminate"]
    assert lines[0]["parsed"] == first
    assert lines[1]["parsed"] == ("yes" if verdict else "no")
    assert len(lines[0]["image_digest"]) == 64

    replay = ReplayBackend(path)
    assert localize(q, replay) == first
    assert discriminate(dq, replay) is verdict
    # queue now empty for this query identity
    with pytest.raises(BackendUnavailableError):
        localize(q, replay)


def test_replay_requires_existing_transcript(tmp_path):
    with pytest.raises(BackendUnavailableError):
        ReplayBackend(tmp_path / "nope.jsonl")


# --- HTTP backend ---


def _http_config(**kw) -> BackendConfig:
    defaults = dict(
        kind="http",
        endpoint="https://api.example.test/v1/chat/completions",
        model="gpt-4o",
        api_key_env="TEST_VLM_KEY",
        max_retries=0,
    )
    defaults.update(kw)
    return BackendConfig(**defaults)


class _FakeResponse:
    def __init__(self, status_code=200, content="The answer is 3."):
        self.status_code = status_code
        self._content = content

    def raise_for_status(self):
        pass

    def json(self):
        return {"choices": [{"message": {"content": self._content}}]}


def test_http_backend_requires_env_key(monkeypatch):
    monkeypatch.delenv("TEST_VLM_KEY", raising=False)
    with pytest.raises(BackendUnavailableError):
        HttpBackend(_http_config())


def test_http_backend_happy_path(monkeypatch):
    monkeypatch.setenv("TEST_VLM_KEY", "sk-test")
    seen = {}

    def fake_post(self, url, json=None, headers=None, timeout=None):
        seen["url"] = url
        seen["auth"] = headers["Authorization"]
        seen["payload"] = json
        return _FakeResponse()

    import requests

    monkeypatch.setattr(requests.Session, "post", fake_post)
    backend = HttpBackend(_http_config())
    grid = _grid({1: 0, 2: 1, 3: 2, 4: 3})
    assert localize(LocalizeQuery(grid=grid, phase="started"), backend) == 3
    assert seen["url"].endswith("/chat/completions")
    assert seen["auth"] == "Bearer sk-test"
    content = seen["payload"]["messages"][0]["content"]
    assert content[0]["type"] == "text"
    assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")


def test_http_backend_retries_transport_errors(monkeypatch):
    monkeypatch.setenv("TEST_VLM_KEY", "sk-test")
    import requests

    attempts = {"n": 0}

    def flaky_post(self, url, json=None, headers=None, timeout=None):
        attempts["n"] += 1
        if attempts["n"] < 3:
            raise requests.ConnectionError("boom")
        return _FakeResponse()

    monkeypatch.setattr(requests.Session, "post", flaky_post)
    monkeypatch.setattr(time, "sleep", lambda s: None)
    backend = HttpBackend(_http_config(max_retries=2))
    grid = _grid({1: 0, 2: 1, 3: 2, 4: 3})
    assert localize(LocalizeQuery(grid=grid, phase="started"), backend) == 3
    assert attempts["n"] == 3


def test_http_backend_gives_up_on_429(monkeypatch):
    monkeypatch.setenv("TEST_VLM_KEY", "sk-test")
    import requests

    monkeypatch.setattr(
        requests.Session, "post",
        lambda self, url, json=None, headers=None, timeout=None: _FakeResponse(429),
    )
    backend = HttpBackend(_http_config(max_retries=0))
    grid = _grid({1: 0, 2: 1, 3: 2, 4: 3})
    with pytest.raises(BackendUnavailableError):
        localize(LocalizeQuery(grid=grid, phase="started"), backend)
