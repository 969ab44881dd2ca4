from __future__ import annotations

import json

import httpx
import pytest

from cryptoscan.gateway import (
    KNOWN_CONTEXT_WINDOWS,
    ContextExceeded,
    Gateway,
    MissingRecording,
    ModelProfile,
    PermanentError,
    ProviderKind,
    RateLimiter,
    RemoteChatProvider,
    ReplayProvider,
    ResponseStatus,
    TransientError,
    TranscriptStore,
    classify_text,
    guard_context,
    known_profile,
)
from cryptoscan.model import DetectionSetting, SourceUnit
from cryptoscan.prompts import PromptBundle, build_detection_prompt

UNIT = SourceUnit.from_text("A.java", 'class A { Object c = Cipher.getInstance("DES"); }\n')
BUNDLE = build_detection_prompt(UNIT, DetectionSetting())
PROFILE = ModelProfile("m", 128_000, endpoint_url="http://model.test/v1/chat", max_retries=3)


def sized_bundle(tokens: int) -> PromptBundle:
    return PromptBundle("A.java", "detect", "s", "", "", "x", "x", tokens)


class Sequenced:
    """Provider that raises or returns from a script, one step per call."""

    live = True

    def __init__(self, *steps):
        self.steps = list(steps)
        self.calls = 0

    def send(self, bundle, profile, query_index):
        self.calls += 1
        step = self.steps.pop(0)
        if isinstance(step, Exception):
            raise step
        return step


class TestContextGuard:
    def test_boundary_fits(self):
        profile = ModelProfile("m", 16_000)
        assert str(guard_context(sized_bundle(16_000 - 2048), profile)) == "Fits"
        assert str(guard_context(sized_bundle(16_000 - 2047), profile)) == "Exceeds(by 1)"

    def test_exceeds_by(self):
        check = guard_context(sized_bundle(15_000), known_profile("gpt-3.5-turbo"))
        assert not check.fits and check.by == 1048

    def test_gateway_refuses_before_sending(self):
        provider = Sequenced("[]")
        gw = Gateway(ModelProfile("m", 1000), provider)
        with pytest.raises(ContextExceeded):
            gw.complete(sized_bundle(5000))
        assert provider.calls == 0

    def test_known_windows(self):
        assert known_profile("gpt-4-turbo").context_window == 128_000
        assert set(KNOWN_CONTEXT_WINDOWS) >= {"gpt-3.5-turbo", "deepseek-coder-33b-instruct"}
        with pytest.raises(KeyError):
            known_profile("nope")

    def test_profile_validation(self):
        with pytest.raises(ValueError):
            ModelProfile("m", 0)
        with pytest.raises(ValueError):
            ModelProfile("m", 10, max_retries=-1)


class TestClassification:
    @pytest.mark.parametrize(
        "text, status",
        [
            ("", ResponseStatus.EMPTY),
            ("  \n ", ResponseStatus.EMPTY),
            ("I'm sorry, but I can't help with that.", ResponseStatus.REFUSAL),
            ("I’m sorry, I cannot assist with this request.", ResponseStatus.REFUSAL),
            ('I\'m sorry for the delay. [{"category": "x", "api": "y", "rootCause": "z"}]', ResponseStatus.OK),
            ("[]", ResponseStatus.OK),
            ("no json at all", ResponseStatus.OK),
        ],
    )
    def test_classify(self, text, status):
        assert classify_text(text) is status


class TestRetries:
    def test_transient_then_success(self):
        sleeps: list[float] = []
        provider = Sequenced(TransientError("429"), TransientError("503"), "[]")
        gw = Gateway(PROFILE, provider, sleep=sleeps.append)
        r = gw.complete(BUNDLE, 2)
        assert r.status is ResponseStatus.OK and r.query_index == 2
        assert sleeps == [1.0, 2.0]
        assert gw.calls == 3

    def test_exhausted(self):
        sleeps: list[float] = []
        provider = Sequenced(*[TransientError("timeout")] * 4)
        r = Gateway(PROFILE, provider, sleep=sleeps.append).complete(BUNDLE)
        assert r.status is ResponseStatus.TRANSPORT_ERROR and "timeout" in r.error
        assert provider.calls == 4 and sleeps == [1.0, 2.0, 4.0]

    def test_backoff_capped(self):
        gw = Gateway(PROFILE, Sequenced(), backoff_cap=5.0)
        assert [gw.backoff(a) for a in range(5)] == [1.0, 2.0, 4.0, 5.0, 5.0]

    def test_permanent_not_retried(self):
        provider = Sequenced(PermanentError("HTTP 401"), "[]")
        r = Gateway(PROFILE, provider, sleep=lambda s: None).complete(BUNDLE)
        assert r.status is ResponseStatus.TRANSPORT_ERROR and provider.calls == 1

    def test_live_responses_are_recorded(self, tmp_path):
        store = TranscriptStore(tmp_path / "t.bin")
        gw = Gateway(PROFILE, Sequenced("[]", "I'm sorry, I can't help."), recorder=store)
        gw.complete(BUNDLE, 0)
        gw.complete(BUNDLE, 1)
        assert store.variants(BUNDLE.prompt_hash, "m") == ["[]", "I'm sorry, I can't help."]


class TestRemoteProvider:
    def make(self, handler):
        return RemoteChatProvider(httpx.Client(transport=httpx.MockTransport(handler)), api_key="k")

    def test_request_shape(self):
        seen = {}

        def handler(request: httpx.Request) -> httpx.Response:
            seen["body"] = json.loads(request.content)
            seen["auth"] = request.headers.get("authorization")
            return httpx.Response(200, json={"choices": [{"message": {"content": "[]"}}]})

        assert self.make(handler).send(BUNDLE, PROFILE, 0) == "[]"
        assert seen["auth"] == "Bearer k"
        assert seen["body"]["model"] == "m" and "temperature" not in seen["body"]
        assert [m["role"] for m in seen["body"]["messages"]] == ["system", "user"]

    def test_temperature_forwarded(self):
        seen = {}

        def handler(request):
            seen.update(json.loads(request.content))
            return httpx.Response(200, json={"choices": [{"message": {"content": "x"}}]})

        profile = ModelProfile("m", 1000, endpoint_url="http://t", temperature=0.0)
        self.make(handler).send(sized_bundle(1), profile, 0)
        assert seen["temperature"] == 0.0

    @pytest.mark.parametrize("code, exc", [(429, TransientError), (503, TransientError), (401, PermanentError), (400, PermanentError)])
    def test_status_mapping(self, code, exc):
        with pytest.raises(exc):
            self.make(lambda r: httpx.Response(code, text="err")).send(BUNDLE, PROFILE, 0)

    def test_connection_error_is_transient(self):
        def handler(request):
            raise httpx.ConnectError("refused", request=request)

        with pytest.raises(TransientError):
            self.make(handler).send(BUNDLE, PROFILE, 0)

    def test_empty_body(self):
        assert self.make(lambda r: httpx.Response(200, content=b"")).send(BUNDLE, PROFILE, 0) == ""

    def test_end_to_end_through_gateway(self):
        replies = iter([httpx.Response(500), httpx.Response(200, json={"choices": [{"message": {"content": "[]"}}]})])
        gw = Gateway(PROFILE, self.make(lambda r: next(replies)), sleep=lambda s: None)
        assert gw.complete(BUNDLE).status is ResponseStatus.OK


class TestTranscripts:
    def test_variants_and_reload(self, tmp_path):
        path = tmp_path / "t.bin"
        store = TranscriptStore(path)
        e0 = store.append("h", "m", "one")
        e1 = store.append("h", "m", "twö\nlines")
        store.append("h", "other", "x")
        assert (e0.variant_index, e1.variant_index) == (0, 1)
        again = TranscriptStore(path)
        assert again.variants("h", "m") == ["one", "twö\nlines"]
        assert again.variants("h", "nobody") == []
        assert [e.model_name for e in again.entries()] == ["m", "m", "other"]

    def test_torn_tail_ignored(self, tmp_path):
        path = tmp_path / "t.bin"
        TranscriptStore(path).append("h", "m", "kept")
        with open(path, "ab") as fh:
            fh.write(b"500\n{\"promptHash\": \"h\"")
        assert TranscriptStore(path).variants("h", "m") == ["kept"]

    def test_corrupt_header(self, tmp_path):
        path = tmp_path / "t.bin"
        path.write_bytes(b"garbage\n{}\n")
        with pytest.raises(ValueError):
            TranscriptStore(path)


class TestReplay:
    def test_round_robin(self, tmp_path):
        store = TranscriptStore(tmp_path / "t.bin")
        for text in ("a", "b"):
            store.append(BUNDLE.prompt_hash, "m", text)
        provider = ReplayProvider(store)
        gw = Gateway(ModelProfile("m", 128_000, ProviderKind.REPLAY), provider)
        assert [gw.complete(BUNDLE, i).text for i in range(5)] == ["a", "b", "a", "b", "a"]
        assert [q for _, q in provider.lookups] == [0, 1, 2, 3, 4]

    def test_missing_recording(self, tmp_path):
        provider = ReplayProvider(tmp_path / "none.bin")
        gw = Gateway(ModelProfile("m", 128_000, ProviderKind.REPLAY), provider)
        with pytest.raises(MissingRecording) as info:
            gw.complete(BUNDLE)
        assert info.value.prompt_hash == BUNDLE.prompt_hash
        assert len(provider.lookups) == 1

    def test_replay_never_retries_or_records(self, tmp_path):
        store = TranscriptStore(tmp_path / "t.bin")
        store.append(BUNDLE.prompt_hash, "m", "[]")
        gw = Gateway(ModelProfile("m", 128_000), ReplayProvider(store), recorder=store)
        gw.complete(BUNDLE)
        assert store.variants(BUNDLE.prompt_hash, "m") == ["[]"]

    def test_replay_profile_requires_provider(self):
        with pytest.raises(ValueError):
            Gateway(ModelProfile("m", 10, ProviderKind.REPLAY))


def test_rate_limiter_spacing():
    now = [0.0]
    slept: list[float] = []

    def sleep(s):
        slept.append(s)
        now[0] += s

    limiter = RateLimiter(2.0, clock=lambda: now[0], sleep=sleep)
    slots = [limiter.acquire() for _ in range(3)]
    assert slots == [0.0, 0.5, 1.0]
    assert slept == [0.5, 0.5]
    with pytest.raises(ValueError):
        RateLimiter(0)
