import base64
import threading
from concurrent.futures import ThreadPoolExecutor

import pytest

from asrfuse.backends import (
    BackendDescriptor,
    BackendTimeout,
    CapabilityError,
    CommandTranscriber,
    CorrectionRequest,
    FileCorrector,
    FileHypothesesBackend,
    HttpCorrector,
    HttpTranscriber,
    MalformedResponse,
    MockCorrector,
    MockTranscriber,
    TransportError,
    UtteranceNotFound,
    build_transcriber,
    llm_correct,
    resolve_env,
)
from asrfuse.core import ConfigError, UtteranceRecord

UTT = UtteranceRecord(utt_id="u0", audio_ref="a.wav")


class TestBackendDescriptor:
    def test_minimal_http(self):
        desc = BackendDescriptor(source_id="s", kind="http", endpoint="http://svc/asr")
        assert desc.retry_attempts == 3

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"source_id": "", "kind": "http", "endpoint": "e"},
            {"source_id": "s", "kind": "carrier_pigeon"},
            {"source_id": "s", "kind": "http"},  # endpoint missing
            {"source_id": "s", "kind": "subprocess"},  # command missing
            {"source_id": "s", "kind": "file_hypotheses"},  # path missing
            {"source_id": "s", "kind": "file_hypotheses", "path": "p", "supports_second_pass": True},
            {"source_id": "s", "kind": "http", "endpoint": "e", "timeout_s": 0},
            {"source_id": "s", "kind": "http", "endpoint": "e", "max_in_flight": 0},
            {"source_id": "s", "kind": "http", "endpoint": "e", "retry_attempts": 0},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            BackendDescriptor(**kwargs)

    def test_endpoint_env_satisfies_http(self):
        BackendDescriptor(source_id="s", kind="http", endpoint_env="ASR_URL")

    def test_from_dict(self):
        desc = BackendDescriptor.from_dict(
            {"source_id": "s", "kind": "subprocess", "command": ["decode", "--fast"]}
        )
        assert desc.command == ("decode", "--fast")

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="url"):
            BackendDescriptor.from_dict({"source_id": "s", "kind": "http", "url": "x"})


class TestResolveEnv:
    def test_literal_passthrough(self):
        assert resolve_env("http://svc", None, what="endpoint", owner="s") == "http://svc"

    def test_env_wins(self, monkeypatch):
        monkeypatch.setenv("ASR_URL", "http://from-env")
        assert resolve_env("ignored", "ASR_URL", what="endpoint", owner="s") == "http://from-env"

    def test_missing_env_is_config_error(self, monkeypatch):
        monkeypatch.delenv("ASR_URL", raising=False)
        with pytest.raises(ConfigError, match="ASR_URL"):
            resolve_env(None, "ASR_URL", what="endpoint", owner="s")

    def test_nothing_given(self):
        assert resolve_env(None, None, what="endpoint", owner="s") is None


class TestFileHypothesesBackend:
    def test_transcribe(self, tmp_path):
        path = tmp_path / "hyp.tsv"
        path.write_text("u0\tAll RIGHT!\nu1\tbye\n", encoding="utf-8")
        backend = FileHypothesesBackend("filesys", path)
        hyp = backend.transcribe(UTT)
        assert hyp.source_id == "filesys"
        assert hyp.tokens == ("all", "right")
        assert hyp.raw_text == "All RIGHT!"

    def test_unknown_utterance(self, tmp_path):
        path = tmp_path / "hyp.tsv"
        path.write_text("other\ttext\n", encoding="utf-8")
        with pytest.raises(UtteranceNotFound):
            FileHypothesesBackend("f", path).transcribe(UTT)

    def test_no_second_pass(self, tmp_path):
        path = tmp_path / "hyp.tsv"
        path.write_text("u0\ttext\n", encoding="utf-8")
        with pytest.raises(CapabilityError):
            FileHypothesesBackend("f", path).second_pass(UTT, None, 200)

    def test_malformed_row(self, tmp_path):
        path = tmp_path / "hyp.tsv"
        path.write_text("just one column\n", encoding="utf-8")
        with pytest.raises(ConfigError, match=":1"):
            FileHypothesesBackend("f", path)


def _http_desc(**kwargs):
    defaults = dict(
        source_id="httpsys",
        kind="http",
        endpoint="http://svc/asr",
        retry_backoff_s=0.5,
        retry_attempts=3,
    )
    defaults.update(kwargs)
    return BackendDescriptor(**defaults)


class RecordingTransport:
    """Scripted transport: pops the next canned outcome per call."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = []

    def __call__(self, endpoint, payload, timeout_s, headers):
        self.calls.append(
            {"endpoint": endpoint, "payload": payload, "timeout_s": timeout_s, "headers": dict(headers)}
        )
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


class TestHttpTranscriber:
    def test_success_payload_and_normalization(self):
        transport = RecordingTransport([{"text": "Hello, WORLD"}])
        client = HttpTranscriber(_http_desc(timeout_s=7.5), transport=transport)
        hyp = client.transcribe(UTT)
        assert hyp.tokens == ("hello", "world")
        call = transport.calls[0]
        assert call["endpoint"] == "http://svc/asr"
        assert call["payload"] == {"utt_id": "u0", "audio_ref": "a.wav", "params": {}}
        assert call["timeout_s"] == 7.5
        assert call["headers"] == {}

    def test_second_pass_params(self):
        transport = RecordingTransport([{"text": "x"}, {"text": "y"}])
        client = HttpTranscriber(_http_desc(supports_second_pass=True), transport=transport)
        client.second_pass(UTT, None, 200)
        client.second_pass(UTT, "lm-v2", 40)
        assert transport.calls[0]["payload"]["params"] == {"second_pass": True, "n_paths": 200}
        assert transport.calls[1]["payload"]["params"] == {
            "second_pass": True,
            "n_paths": 40,
            "lm_ref": "lm-v2",
        }

    def test_capability_checked_before_any_network_call(self):
        transport = RecordingTransport([])
        client = HttpTranscriber(_http_desc(), transport=transport)
        with pytest.raises(CapabilityError):
            client.second_pass(UTT, None, 200)
        assert transport.calls == []

    def test_retries_with_exponential_backoff(self):
        transport = RecordingTransport(
            [TransportError("flaky"), BackendTimeout("slow"), {"text": "ok"}]
        )
        sleeps = []
        client = HttpTranscriber(_http_desc(), transport=transport, sleep=sleeps.append)
        hyp = client.transcribe(UTT)
        assert hyp.tokens == ("ok",)
        assert len(transport.calls) == 3
        assert sleeps == [0.5, 1.0]

    def test_exhausted_retries_raise_the_last_error(self):
        transport = RecordingTransport(
            [TransportError("one"), TransportError("two"), BackendTimeout("three")]
        )
        sleeps = []
        client = HttpTranscriber(_http_desc(), transport=transport, sleep=sleeps.append)
        with pytest.raises(BackendTimeout, match="three"):
            client.transcribe(UTT)
        assert len(transport.calls) == 3
        assert sleeps == [0.5, 1.0]  # no sleep after the final attempt

    def test_missing_text_field_is_malformed_and_retried(self):
        transport = RecordingTransport([{"nope": 1}, {"nope": 2}, {"nope": 3}])
        client = HttpTranscriber(_http_desc(), transport=transport, sleep=lambda _: None)
        with pytest.raises(MalformedResponse):
            client.transcribe(UTT)
        assert len(transport.calls) == 3

    def test_endpoint_and_token_from_environment(self, monkeypatch):
        monkeypatch.setenv("ASR_URL", "http://secret-host/v1")
        monkeypatch.setenv("ASR_TOKEN", "tok-123")
        transport = RecordingTransport([{"text": "hi"}])
        desc = _http_desc(endpoint=None, endpoint_env="ASR_URL", auth_token_env="ASR_TOKEN")
        HttpTranscriber(desc, transport=transport).transcribe(UTT)
        call = transport.calls[0]
        assert call["endpoint"] == "http://secret-host/v1"
        assert call["headers"] == {"Authorization": "Bearer tok-123"}

    def test_missing_endpoint_env_fails_at_construction(self, monkeypatch):
        monkeypatch.delenv("ASR_URL", raising=False)
        with pytest.raises(ConfigError, match="ASR_URL"):
            HttpTranscriber(_http_desc(endpoint=None, endpoint_env="ASR_URL"))

    def test_in_flight_requests_capped(self):
        lock = threading.Lock()
        state = {"now": 0, "peak": 0}
        release = threading.Event()

        def transport(endpoint, payload, timeout_s, headers):
            with lock:
                state["now"] += 1
                state["peak"] = max(state["peak"], state["now"])
            release.wait(timeout=5)
            with lock:
                state["now"] -= 1
            return {"text": "ok"}

        client = HttpTranscriber(_http_desc(max_in_flight=2), transport=transport)
        utts = [UtteranceRecord(utt_id=f"u{i}") for i in range(6)]
        with ThreadPoolExecutor(max_workers=6) as pool:
            futures = [pool.submit(client.transcribe, u) for u in utts]
            # give every worker a chance to pile up on the semaphore
            import time as _time

            deadline = _time.monotonic() + 5
            while state["peak"] < 2 and _time.monotonic() < deadline:
                _time.sleep(0.01)
            release.set()
            for fut in futures:
                assert fut.result().tokens == ("ok",)
        assert state["peak"] == 2


class TestCommandTranscriber:
    def _desc(self, *command, **kwargs):
        return BackendDescriptor(source_id="cmdsys", kind="subprocess", command=command, **kwargs)

    def test_stdout_becomes_hypothesis(self):
        client = CommandTranscriber(self._desc("sh", "-c", "echo All Right"))
        hyp = client.transcribe(UTT)
        assert hyp.tokens == ("all", "right")

    def test_arguments_appended(self):
        client = CommandTranscriber(self._desc("sh", "-c", 'echo "$@"', "argv0"))
        hyp = client.transcribe(UTT)
        assert hyp.raw_text == "u0 a.wav"

    def test_missing_audio_ref_becomes_empty_arg(self):
        client = CommandTranscriber(self._desc("sh", "-c", 'echo "count=$#"', "argv0"))
        hyp = client.transcribe(UtteranceRecord(utt_id="u9"))
        assert hyp.raw_text == "count=2"

    def test_second_pass_flags(self):
        client = CommandTranscriber(
            self._desc("sh", "-c", 'echo "$@"', "argv0", supports_second_pass=True)
        )
        hyp = client.second_pass(UTT, "my-lm", 50)
        assert hyp.raw_text == "u0 a.wav --n-paths 50 --lm-ref my-lm"

    def test_nonzero_exit_is_transport_error(self):
        client = CommandTranscriber(self._desc("sh", "-c", "echo broken >&2; exit 3"))
        with pytest.raises(TransportError, match="exited 3"):
            client.transcribe(UTT)

    def test_missing_binary_is_transport_error(self):
        client = CommandTranscriber(self._desc("/no/such/binary"))
        with pytest.raises(TransportError):
            client.transcribe(UTT)

    def test_timeout(self):
        client = CommandTranscriber(self._desc("sh", "-c", "sleep 5", timeout_s=0.2))
        with pytest.raises(BackendTimeout):
            client.transcribe(UTT)

    def test_no_second_pass_without_capability(self):
        client = CommandTranscriber(self._desc("sh", "-c", "echo hi"))
        with pytest.raises(CapabilityError):
            client.second_pass(UTT, None, 200)


class TestBuildTranscriber:
    def test_dispatch(self, tmp_path):
        path = tmp_path / "h.tsv"
        path.write_text("u0\thi\n", encoding="utf-8")
        file_desc = BackendDescriptor(source_id="f", kind="file_hypotheses", path=str(path))
        assert isinstance(build_transcriber(file_desc), FileHypothesesBackend)
        assert isinstance(build_transcriber(_http_desc()), HttpTranscriber)
        cmd_desc = BackendDescriptor(source_id="c", kind="subprocess", command=("true",))
        assert isinstance(build_transcriber(cmd_desc), CommandTranscriber)


class TestMockTranscriber:
    def test_injected_failure(self):
        mock = MockTranscriber("m", {"u0": "x"}, fail_utts=frozenset({"u0"}))
        with pytest.raises(TransportError):
            mock.transcribe(UTT)

    def test_second_pass_capability_and_recording(self):
        mock = MockTranscriber(
            "m", {"u0": "x"}, supports_second_pass=True, second_pass_table={"u0": "y"}
        )
        hyp = mock.second_pass(UTT, "lm", 7)
        assert hyp.tokens == ("y",)
        assert mock.second_pass_calls == [("u0", "lm", 7)]
        incapable = MockTranscriber("m2", {})
        with pytest.raises(CapabilityError):
            incapable.second_pass(UTT, None, 1)


class TestHttpCorrector:
    def _req(self, **kwargs):
        defaults = dict(instruction="fix `{x}|<y>|[z]`", utt_id="u0")
        defaults.update(kwargs)
        return CorrectionRequest(**defaults)

    def test_payload_without_audio(self):
        transport = RecordingTransport([{"text": "fixed"}])
        corr = HttpCorrector("http://svc/fix", transport=transport)
        assert corr.correct(self._req()) == "fixed"
        payload = transport.calls[0]["payload"]
        assert payload["instruction"].startswith("fix ")
        assert payload["params"] == {"temperature": 0.0, "max_new_tokens": 512}
        assert "audio_ref" not in payload and "audio_b64" not in payload

    def test_audio_ref_mode(self):
        transport = RecordingTransport([{"text": "ok"}])
        corr = HttpCorrector("http://svc/fix", transport=transport)
        corr.correct(self._req(audio_ref="clip.wav"))
        payload = transport.calls[0]["payload"]
        assert payload["audio_ref"] == "clip.wav"
        assert "audio_b64" not in payload

    def test_inline_base64_mode(self, tmp_path):
        wav = tmp_path / "clip.wav"
        wav.write_bytes(b"RIFF....WAVE")
        transport = RecordingTransport([{"text": "ok"}])
        corr = HttpCorrector("http://svc/fix", audio_mode="inline_base64", transport=transport)
        corr.correct(self._req(audio_ref=str(wav)))
        payload = transport.calls[0]["payload"]
        assert base64.b64decode(payload["audio_b64"]) == b"RIFF....WAVE"
        assert "audio_ref" not in payload

    def test_bad_audio_mode(self):
        with pytest.raises(ConfigError):
            HttpCorrector("http://svc", audio_mode="telepathy")

    def test_needs_some_endpoint(self):
        with pytest.raises(ConfigError):
            HttpCorrector()

    def test_endpoint_env_and_auth(self, monkeypatch):
        monkeypatch.setenv("FIX_URL", "http://fixer")
        monkeypatch.setenv("FIX_TOKEN", "secret")
        transport = RecordingTransport([{"text": "ok"}])
        corr = HttpCorrector(endpoint_env="FIX_URL", auth_token_env="FIX_TOKEN", transport=transport)
        corr.correct(self._req())
        call = transport.calls[0]
        assert call["endpoint"] == "http://fixer"
        assert call["headers"]["Authorization"] == "Bearer secret"

    def test_missing_text_is_malformed(self):
        transport = RecordingTransport([{"weird": True}])
        corr = HttpCorrector("http://svc", transport=transport)
        with pytest.raises(MalformedResponse):
            corr.correct(self._req())


class TestFileCorrector:
    def test_lookup(self, tmp_path):
        path = tmp_path / "corr.tsv"
        path.write_text("u0\tall fixed\n", encoding="utf-8")
        corr = FileCorrector(path)
        assert corr.correct(CorrectionRequest(instruction="i", utt_id="u0")) == "all fixed"
        with pytest.raises(UtteranceNotFound):
            corr.correct(CorrectionRequest(instruction="i", utt_id="u1"))


class TestLlmCorrect:
    def _req(self):
        return CorrectionRequest(instruction="inst", utt_id="u0")

    def test_clean_response(self):
        result = llm_correct(MockCorrector({"u0": "All right, bye"}), self._req())
        assert result.text == "all right bye"
        assert result.raw_text == "All right, bye"
        assert not result.fallback
        assert result.warnings == ()

    def test_bracket_residue_warns_but_does_not_fall_back(self):
        result = llm_correct(MockCorrector({"u0": "right {two}|<too>|[too] bye"}), self._req())
        assert not result.fallback
        # bracket characters are deleted by normalization, not spaced out
        assert result.text == "right twotootoo bye"
        assert any("confusion-grammar" in w for w in result.warnings)

    def test_empty_response_falls_back(self):
        result = llm_correct(MockCorrector({"u0": "   "}), self._req())
        assert result.fallback
        assert result.text == ""
        assert any("empty" in w for w in result.warnings)

    def test_default_corrector_answer(self):
        mock = MockCorrector({}, default="same for all")
        assert llm_correct(mock, self._req()).text == "same for all"
        assert mock.requests[0].utt_id == "u0"

    def test_missing_canned_answer(self):
        with pytest.raises(UtteranceNotFound):
            llm_correct(MockCorrector({}), self._req())
