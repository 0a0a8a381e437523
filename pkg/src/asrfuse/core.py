"""Shared domain types: normalization, hypotheses, manifests, pipeline configuration.

Tokens are plain strings that are non-empty and contain no whitespace.
Emptiness is always structural (an absent alternative, an empty token
tuple), never an empty-string token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping

DEFAULT_STRIP_CHARS = '.,!?;:"{}<>[]|'

GATE_MODES = ("all_pairs", "anchor_pairs")
CER_NORMS = ("max", "ref_first")
RANK_SCOPES = ("corpus", "utterance")


class ConfigError(ValueError):
    """Invalid configuration detected at setup time."""


class ManifestError(ValueError):
    """Malformed manifest file."""


def validate_token(token: str) -> str:
    """Return *token* unchanged, raising ValueError if it is empty or holds whitespace."""
    if not isinstance(token, str) or not token:
        raise ValueError(f"empty or non-string token: {token!r}")
    if any(ch.isspace() for ch in token):
        raise ValueError(f"token contains whitespace: {token!r}")
    return token


@lru_cache(maxsize=64)
def _deletion_table(chars: str) -> dict[int, None]:
    return {ord(ch): None for ch in chars}


@dataclass(frozen=True)
class TextNormalizer:
    """Deterministic raw-text -> token-list mapping applied to every transcript.

    Lowercases, deletes the configured punctuation characters (which by
    default include the bracket characters reserved by the confusion
    network grammar), and splits on whitespace runs.  Idempotent: feeding
    the joined output back in reproduces the same tokens.
    """

    lowercase: bool = True
    strip_chars: str = DEFAULT_STRIP_CHARS

    def __call__(self, raw: str) -> list[str]:
        s = raw.lower() if self.lowercase else raw
        if self.strip_chars:
            s = s.translate(_deletion_table(self.strip_chars))
        return s.split()

    def text(self, raw: str) -> str:
        return " ".join(self(raw))

    def to_dict(self) -> dict:
        return {"lowercase": self.lowercase, "strip_chars": self.strip_chars}

    @classmethod
    def from_dict(cls, d: Mapping) -> TextNormalizer:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown normalizer options: {sorted(extra)}")
        return cls(**d)


DEFAULT_NORMALIZER = TextNormalizer()


def normalize(raw: str, normalizer: TextNormalizer = DEFAULT_NORMALIZER) -> list[str]:
    return normalizer(raw)


@dataclass(frozen=True)
class Hypothesis:
    """One system's transcript for one utterance, in normalized token form."""

    source_id: str
    tokens: tuple[str, ...]
    raw_text: str = ""

    def __post_init__(self) -> None:
        if not self.source_id:
            raise ValueError("hypothesis needs a source_id")
        for tok in self.tokens:
            validate_token(tok)

    @classmethod
    def from_raw(
        cls, source_id: str, raw_text: str, normalizer: TextNormalizer = DEFAULT_NORMALIZER
    ) -> Hypothesis:
        return cls(source_id=source_id, tokens=tuple(normalizer(raw_text)), raw_text=raw_text)

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class UtteranceRecord:
    """One manifest row: an utterance to transcribe, with optional ground truth."""

    utt_id: str
    audio_ref: str = ""
    duration_s: float | None = None
    domain: str | None = None
    reference_text: str | None = None

    def __post_init__(self) -> None:
        if not self.utt_id:
            raise ValueError("utterance needs a non-empty utt_id")
        if self.duration_s is not None and self.duration_s < 0:
            raise ValueError(f"negative duration for {self.utt_id}: {self.duration_s}")


_MANIFEST_KEYS = ("utt_id", "audio_ref", "duration_s", "domain", "reference_text")


def read_manifest(path: str | Path) -> list[UtteranceRecord]:
    """Load a JSONL manifest, enforcing unique utterance ids.

    Raises ManifestError with the offending line number on bad input.
    """
    records: list[UtteranceRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            if not isinstance(row, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            unknown = set(row) - set(_MANIFEST_KEYS)
            if unknown:
                raise ManifestError(f"{path}:{lineno}: unknown manifest keys {sorted(unknown)}")
            try:
                rec = UtteranceRecord(**row)
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if rec.utt_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate utt_id {rec.utt_id!r}")
            seen.add(rec.utt_id)
            records.append(rec)
    return records


def write_manifest(records: Iterable[UtteranceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            row: dict = {"utt_id": rec.utt_id, "audio_ref": rec.audio_ref}
            if rec.duration_s is not None:
                row["duration_s"] = rec.duration_s
            if rec.domain is not None:
                row["domain"] = rec.domain
            if rec.reference_text is not None:
                row["reference_text"] = rec.reference_text
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs shared across the fusion pipeline.

    priority orders source ids for every deterministic tie-break (gate
    representative, ranking ties, second-pass candidate).  Sources not
    listed sort after listed ones, alphabetically.
    """

    normalizer: TextNormalizer = DEFAULT_NORMALIZER
    cer_zero_epsilon: float = 0.0
    n_paths: int = 200
    temperature: float = 0.0
    max_new_tokens: int = 512
    priority: tuple[str, ...] = ()
    gate_mode: str = "all_pairs"
    cer_norm: str = "max"
    rank_scope: str = "corpus"
    lm_ref: str | None = None

    def __post_init__(self) -> None:
        if self.n_paths < 1:
            raise ConfigError(f"n_paths must be >= 1, got {self.n_paths}")
        if self.max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.cer_zero_epsilon < 0:
            raise ConfigError(f"cer_zero_epsilon must be >= 0, got {self.cer_zero_epsilon}")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")
        if self.cer_norm not in CER_NORMS:
            raise ConfigError(f"cer_norm must be one of {CER_NORMS}, got {self.cer_norm!r}")
        if self.rank_scope not in RANK_SCOPES:
            raise ConfigError(f"rank_scope must be one of {RANK_SCOPES}, got {self.rank_scope!r}")
        if len(set(self.priority)) != len(self.priority):
            raise ConfigError(f"priority list repeats a source id: {self.priority}")

    def priority_key(self, source_id: str) -> tuple[int, str]:
        """Sort key placing configured sources first, the rest alphabetically."""
        try:
            return (self.priority.index(source_id), source_id)
        except ValueError:
            return (len(self.priority), source_id)

    @classmethod
    def from_dict(cls, d: Mapping) -> PipelineConfig:
        kwargs = dict(d)
        norm = kwargs.pop("normalizer", None)
        known = {f.name for f in fields(cls)} - {"normalizer"}
        extra = set(kwargs) - known
        if extra:
            raise ConfigError(f"unknown pipeline options: {sorted(extra)}")
        if "priority" in kwargs:
            kwargs["priority"] = tuple(kwargs["priority"])
        if norm is not None:
            kwargs["normalizer"] = TextNormalizer.from_dict(norm)
        return cls(**kwargs)
