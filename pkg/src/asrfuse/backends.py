"""Transcription and correction clients plus hermetic stand-ins.

Every network-facing client retries transient failures with exponential
backoff, honors a per-backend in-flight cap, and raises typed errors so
the pipeline can fail a single utterance instead of the whole run.
Endpoints and credentials come from configuration or environment
variables and are never logged.
"""

from __future__ import annotations

import base64
import logging
import os
import subprocess
import threading
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, Protocol, runtime_checkable

import requests

from .core import ConfigError, DEFAULT_NORMALIZER, Hypothesis, TextNormalizer, UtteranceRecord

log = logging.getLogger(__name__)

BACKEND_KINDS = ("file_hypotheses", "subprocess", "http")


def resolve_env(value: str | None, env_name: str | None, *, what: str, owner: str) -> str | None:
    """Pick a literal value or read it from the named environment variable.

    Values resolved this way (endpoints, credentials) must never appear
    in logs or error messages; callers only ever log the variable name.
    """
    if env_name:
        got = os.environ.get(env_name)
        if got is None or got == "":
            raise ConfigError(f"{owner}: environment variable {env_name} is not set ({what})")
        return got
    return value


class BackendError(Exception):
    """Base for everything a backend can raise per utterance."""


class BackendTimeout(BackendError):
    pass


class TransportError(BackendError):
    pass


class MalformedResponse(BackendError):
    pass


class UtteranceNotFound(BackendError):
    pass


class CapabilityError(BackendError):
    """The backend cannot perform the requested operation at all."""


_RETRYABLE = (BackendTimeout, TransportError, MalformedResponse)


@dataclass(frozen=True)
class BackendDescriptor:
    """Declarative description of one transcription system."""

    source_id: str
    kind: str
    path: str | None = None
    endpoint: str | None = None
    endpoint_env: str | None = None
    auth_token_env: str | None = None
    command: tuple[str, ...] | None = None
    supports_second_pass: bool = False
    timeout_s: float = 30.0
    max_in_flight: int = 4
    retry_attempts: int = 3
    retry_backoff_s: float = 0.5

    def __post_init__(self) -> None:
        if not self.source_id:
            raise ConfigError("backend needs a source_id")
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"unknown backend kind {self.kind!r}, expected one of {BACKEND_KINDS}")
        if self.kind == "file_hypotheses":
            if not self.path:
                raise ConfigError(f"{self.source_id}: file_hypotheses backend needs a path")
            if self.supports_second_pass:
                raise ConfigError(
                    f"{self.source_id}: a static hypothesis file cannot serve a second pass"
                )
        if self.kind == "http" and not (self.endpoint or self.endpoint_env):
            raise ConfigError(f"{self.source_id}: http backend needs an endpoint or endpoint_env")
        if self.kind == "subprocess" and not self.command:
            raise ConfigError(f"{self.source_id}: subprocess backend needs a command")
        if self.timeout_s <= 0:
            raise ConfigError(f"{self.source_id}: timeout_s must be positive")
        if self.max_in_flight < 1:
            raise ConfigError(f"{self.source_id}: max_in_flight must be >= 1")
        if self.retry_attempts < 1:
            raise ConfigError(f"{self.source_id}: retry_attempts must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> BackendDescriptor:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown backend options: {sorted(extra)}")
        kwargs = dict(d)
        if "command" in kwargs and kwargs["command"] is not None:
            kwargs["command"] = tuple(kwargs["command"])
        return cls(**kwargs)


@runtime_checkable
class Transcriber(Protocol):
    source_id: str
    supports_second_pass: bool

    def transcribe(self, utt: UtteranceRecord) -> Hypothesis: ...

    def second_pass(self, utt: UtteranceRecord, lm_ref: str | None, n_paths: int) -> Hypothesis: ...


def _retrying(
    fn: Callable[[], Hypothesis],
    *,
    attempts: int,
    backoff_s: float,
    sleep: Callable[[float], None],
    label: str,
) -> Hypothesis:
    last: BackendError | None = None
    for attempt in range(attempts):
        try:
            return fn()
        except _RETRYABLE as exc:
            last = exc
            if attempt + 1 < attempts:
                delay = backoff_s * (2**attempt)
                log.debug("%s attempt %d failed (%s), retrying in %.2fs", label, attempt + 1, exc, delay)
                sleep(delay)
    assert last is not None
    raise last


class FileHypothesesBackend:
    """Offline system: utt_id<TAB>text rows loaded once from a TSV file.

    The whole pipeline runs hermetically on these.  A second pass is a
    capability error by construction.
    """

    supports_second_pass = False

    def __init__(
        self, source_id: str, path: str | Path, normalizer: TextNormalizer = DEFAULT_NORMALIZER
    ) -> None:
        self.source_id = source_id
        self._normalizer = normalizer
        self._table: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                utt_id, sep, text = line.partition("\t")
                if not sep:
                    raise ConfigError(f"{path}:{lineno}: expected utt_id<TAB>text")
                self._table[utt_id] = text

    def transcribe(self, utt: UtteranceRecord) -> Hypothesis:
        try:
            raw = self._table[utt.utt_id]
        except KeyError:
            raise UtteranceNotFound(f"{self.source_id} has no hypothesis for {utt.utt_id!r}") from None
        return Hypothesis.from_raw(self.source_id, raw, self._normalizer)

    def second_pass(self, utt: UtteranceRecord, lm_ref: str | None, n_paths: int) -> Hypothesis:
        raise CapabilityError(f"{self.source_id} is a static hypothesis file; no second pass")


# transport(endpoint, payload, timeout_s, headers) -> decoded JSON object
Transport = Callable[[str, dict, float, Mapping[str, str]], dict]


def _requests_transport(
    endpoint: str, payload: dict, timeout_s: float, headers: Mapping[str, str]
) -> dict:
    try:
        resp = requests.post(endpoint, json=payload, timeout=timeout_s, headers=dict(headers))
    except requests.Timeout as exc:
        raise BackendTimeout(f"no response within {timeout_s}s") from exc
    except requests.RequestException as exc:
        # exception text can embed the endpoint URL; report only the kind
        raise TransportError(f"request failed: {type(exc).__name__}") from exc
    if resp.status_code != 200:
        raise TransportError(f"HTTP {resp.status_code}")
    try:
        body = resp.json()
    except ValueError as exc:
        raise MalformedResponse("response is not JSON") from exc
    if not isinstance(body, dict):
        raise MalformedResponse(f"expected a JSON object, got {type(body).__name__}")
    return body


def _auth_headers(token: str | None) -> dict[str, str]:
    return {"Authorization": f"Bearer {token}"} if token else {}


class HttpTranscriber:
    """POSTs {utt_id, audio_ref, params} to an endpoint returning {"text": ...}.

    A semaphore caps concurrent requests per backend; each attempt
    honors timeout_s, and transient failures back off exponentially.
    """

    def __init__(
        self,
        descriptor: BackendDescriptor,
        normalizer: TextNormalizer = DEFAULT_NORMALIZER,
        transport: Transport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if descriptor.kind != "http":
            raise ConfigError(f"HttpTranscriber got a {descriptor.kind!r} descriptor")
        self.source_id = descriptor.source_id
        self.supports_second_pass = descriptor.supports_second_pass
        self._desc = descriptor
        self._endpoint = resolve_env(
            descriptor.endpoint, descriptor.endpoint_env, what="endpoint", owner=descriptor.source_id
        )
        self._headers = _auth_headers(
            resolve_env(None, descriptor.auth_token_env, what="auth token", owner=descriptor.source_id)
        )
        self._normalizer = normalizer
        self._transport = transport or _requests_transport
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(descriptor.max_in_flight)

    def _call(self, utt: UtteranceRecord, params: dict) -> Hypothesis:
        payload = {"utt_id": utt.utt_id, "audio_ref": utt.audio_ref, "params": params}

        def once() -> Hypothesis:
            with self._gate:
                body = self._transport(self._endpoint, payload, self._desc.timeout_s, self._headers)
            if "text" not in body or not isinstance(body["text"], str):
                raise MalformedResponse(f"missing 'text' in response for {utt.utt_id!r}")
            return Hypothesis.from_raw(self.source_id, body["text"], self._normalizer)

        return _retrying(
            once,
            attempts=self._desc.retry_attempts,
            backoff_s=self._desc.retry_backoff_s,
            sleep=self._sleep,
            label=f"{self.source_id}/{utt.utt_id}",
        )

    def transcribe(self, utt: UtteranceRecord) -> Hypothesis:
        return self._call(utt, params={})

    def second_pass(self, utt: UtteranceRecord, lm_ref: str | None, n_paths: int) -> Hypothesis:
        if not self.supports_second_pass:
            raise CapabilityError(f"{self.source_id} does not support a second decoding pass")
        params: dict = {"second_pass": True, "n_paths": n_paths}
        if lm_ref is not None:
            params["lm_ref"] = lm_ref
        return self._call(utt, params=params)


class CommandTranscriber:
    """Runs a local command per utterance; stdout is the transcript."""

    def __init__(
        self,
        descriptor: BackendDescriptor,
        normalizer: TextNormalizer = DEFAULT_NORMALIZER,
    ) -> None:
        if descriptor.kind != "subprocess":
            raise ConfigError(f"CommandTranscriber got a {descriptor.kind!r} descriptor")
        self.source_id = descriptor.source_id
        self.supports_second_pass = descriptor.supports_second_pass
        self._desc = descriptor
        self._normalizer = normalizer

    def _run(self, argv: list[str]) -> Hypothesis:
        try:
            proc = subprocess.run(
                argv, capture_output=True, text=True, timeout=self._desc.timeout_s, check=False
            )
        except subprocess.TimeoutExpired as exc:
            raise BackendTimeout(f"command exceeded {self._desc.timeout_s}s") from exc
        except OSError as exc:
            raise TransportError(f"could not run command: {exc}") from exc
        if proc.returncode != 0:
            raise TransportError(f"command exited {proc.returncode}: {proc.stderr.strip()[:200]}")
        return Hypothesis.from_raw(self.source_id, proc.stdout.strip(), self._normalizer)

    def transcribe(self, utt: UtteranceRecord) -> Hypothesis:
        return self._run(list(self._desc.command) + [utt.utt_id, utt.audio_ref or ""])

    def second_pass(self, utt: UtteranceRecord, lm_ref: str | None, n_paths: int) -> Hypothesis:
        if not self.supports_second_pass:
            raise CapabilityError(f"{self.source_id} does not support a second decoding pass")
        argv = list(self._desc.command) + [utt.utt_id, utt.audio_ref or "", "--n-paths", str(n_paths)]
        if lm_ref is not None:
            argv += ["--lm-ref", lm_ref]
        return self._run(argv)


class MockTranscriber:
    """In-memory backend for tests: canned texts, optional failures.

    second_pass_table, when given, is consulted by second_pass;
    otherwise the first-pass text is returned again.
    """

    def __init__(
        self,
        source_id: str,
        table: Mapping[str, str],
        *,
        normalizer: TextNormalizer = DEFAULT_NORMALIZER,
        supports_second_pass: bool = False,
        second_pass_table: Mapping[str, str] | None = None,
        fail_utts: frozenset[str] = frozenset(),
    ) -> None:
        self.source_id = source_id
        self.supports_second_pass = supports_second_pass
        self._table = dict(table)
        self._second = dict(second_pass_table or {})
        self._normalizer = normalizer
        self._fail = fail_utts
        self.second_pass_calls: list[tuple[str, str | None, int]] = []

    def transcribe(self, utt: UtteranceRecord) -> Hypothesis:
        if utt.utt_id in self._fail:
            raise TransportError(f"injected failure for {utt.utt_id}")
        try:
            raw = self._table[utt.utt_id]
        except KeyError:
            raise UtteranceNotFound(f"{self.source_id} has no hypothesis for {utt.utt_id!r}") from None
        return Hypothesis.from_raw(self.source_id, raw, self._normalizer)

    def second_pass(self, utt: UtteranceRecord, lm_ref: str | None, n_paths: int) -> Hypothesis:
        if not self.supports_second_pass:
            raise CapabilityError(f"{self.source_id} does not support a second decoding pass")
        self.second_pass_calls.append((utt.utt_id, lm_ref, n_paths))
        raw = self._second.get(utt.utt_id, self._table.get(utt.utt_id))
        if raw is None:
            raise UtteranceNotFound(f"{self.source_id} has no hypothesis for {utt.utt_id!r}")
        return Hypothesis.from_raw(self.source_id, raw, self._normalizer)


def build_transcriber(
    descriptor: BackendDescriptor,
    normalizer: TextNormalizer = DEFAULT_NORMALIZER,
    transport: Transport | None = None,
) -> Transcriber:
    if descriptor.kind == "file_hypotheses":
        return FileHypothesesBackend(descriptor.source_id, descriptor.path, normalizer)
    if descriptor.kind == "http":
        return HttpTranscriber(descriptor, normalizer, transport=transport)
    return CommandTranscriber(descriptor, normalizer)


@dataclass(frozen=True)
class CorrectionRequest:
    """One prompt for the correction model."""

    instruction: str
    utt_id: str = ""
    audio_ref: str | None = None
    temperature: float = 0.0
    max_new_tokens: int = 512


@dataclass(frozen=True)
class CorrectionResult:
    text: str
    raw_text: str
    fallback: bool
    warnings: tuple[str, ...] = ()


class Corrector(Protocol):
    def correct(self, req: CorrectionRequest) -> str: ...


class HttpCorrector:
    """POSTs an instruction (plus optional audio) to a correction endpoint.

    audio_mode "ref" sends the audio reference as-is; "inline_base64"
    reads the file and embeds its bytes.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        *,
        endpoint_env: str | None = None,
        auth_token_env: str | None = None,
        timeout_s: float = 60.0,
        audio_mode: str = "ref",
        transport: Transport | None = None,
    ) -> None:
        if audio_mode not in ("ref", "inline_base64"):
            raise ConfigError(f"audio_mode must be 'ref' or 'inline_base64', got {audio_mode!r}")
        if not (endpoint or endpoint_env):
            raise ConfigError("corrector needs an endpoint or endpoint_env")
        self._endpoint = resolve_env(endpoint, endpoint_env, what="endpoint", owner="corrector")
        self._headers = _auth_headers(
            resolve_env(None, auth_token_env, what="auth token", owner="corrector")
        )
        self._timeout_s = timeout_s
        self._audio_mode = audio_mode
        self._transport = transport or _requests_transport

    def correct(self, req: CorrectionRequest) -> str:
        payload: dict = {
            "utt_id": req.utt_id,
            "instruction": req.instruction,
            "params": {"temperature": req.temperature, "max_new_tokens": req.max_new_tokens},
        }
        if req.audio_ref is not None:
            if self._audio_mode == "inline_base64":
                payload["audio_b64"] = base64.b64encode(Path(req.audio_ref).read_bytes()).decode("ascii")
            else:
                payload["audio_ref"] = req.audio_ref
        body = self._transport(self._endpoint, payload, self._timeout_s, self._headers)
        if "text" not in body or not isinstance(body["text"], str):
            raise MalformedResponse(f"missing 'text' in correction response for {req.utt_id!r}")
        return body["text"]


class MockCorrector:
    """Canned correction responses keyed by utt_id, for hermetic tests."""

    def __init__(self, responses: Mapping[str, str], default: str | None = None) -> None:
        self._responses = dict(responses)
        self._default = default
        self.requests: list[CorrectionRequest] = []

    def correct(self, req: CorrectionRequest) -> str:
        self.requests.append(req)
        if req.utt_id in self._responses:
            return self._responses[req.utt_id]
        if self._default is not None:
            return self._default
        raise UtteranceNotFound(f"no canned correction for {req.utt_id!r}")


class FileCorrector:
    """Corrections from a utt_id<TAB>text TSV, the offline counterpart of HttpCorrector."""

    def __init__(self, path: str | Path) -> None:
        self._table: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                utt_id, sep, text = line.partition("\t")
                if not sep:
                    raise ConfigError(f"{path}:{lineno}: expected utt_id<TAB>text")
                self._table[utt_id] = text

    def correct(self, req: CorrectionRequest) -> str:
        try:
            return self._table[req.utt_id]
        except KeyError:
            raise UtteranceNotFound(f"no correction for {req.utt_id!r}") from None


_GRAMMAR_RESIDUE = set("{}<>[]|")


def llm_correct(
    client: Corrector,
    req: CorrectionRequest,
    normalizer: TextNormalizer = DEFAULT_NORMALIZER,
) -> CorrectionResult:
    """Run one correction and audit the response.

    The returned text is normalized.  An empty response sets fallback
    so the caller can keep the arbitration output instead; bracket
    characters leaking from the prompt grammar are reported as warnings.
    """
    raw = client.correct(req)
    warnings: list[str] = []
    residue = sorted(_GRAMMAR_RESIDUE.intersection(raw))
    if residue:
        warnings.append(f"response contains confusion-grammar characters {residue}")
    text = normalizer.text(raw)
    fallback = text == ""
    if fallback:
        warnings.append("empty response; caller should fall back to arbitration output")
    return CorrectionResult(text=text, raw_text=raw, fallback=fallback, warnings=tuple(warnings))
