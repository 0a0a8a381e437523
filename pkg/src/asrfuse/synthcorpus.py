"""Synthetic corpora with planted truth and per-system noise channels.

Every random draw is keyed by (seed, purpose, utt_id, position), so a
corpus is reproducible token-for-token no matter how generation is
parallelized or which subset of utterances is regenerated.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path

from .core import UtteranceRecord, validate_token

DEFAULT_VOCABULARY = (
    "the", "a", "and", "to", "of", "in", "it", "is", "was", "for",
    "on", "are", "as", "with", "his", "they", "at", "be", "this", "have",
    "from", "or", "one", "had", "by", "word", "but", "not", "what", "all",
    "were", "we", "when", "your", "can", "said", "there", "use", "an", "each",
)


def _rng(*key: object) -> random.Random:
    # string seeds hash via sha512 inside Random, stable across processes
    return random.Random("\x1f".join(str(k) for k in key))


@dataclass(frozen=True)
class ChannelSpec:
    """One simulated system's error profile."""

    source_id: str
    sub_rate: float = 0.0
    del_rate: float = 0.0
    ins_rate: float = 0.0
    vocabulary: tuple[str, ...] = DEFAULT_VOCABULARY

    def __post_init__(self) -> None:
        for name in ("sub_rate", "del_rate", "ins_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{self.source_id}: {name} must be in [0, 1], got {rate}")
        if self.sub_rate + self.del_rate > 1.0:
            raise ValueError(
                f"{self.source_id}: sub_rate + del_rate must be <= 1, "
                f"got {self.sub_rate} + {self.del_rate}"
            )
        if not self.vocabulary:
            raise ValueError(f"{self.source_id}: vocabulary must not be empty")
        for tok in self.vocabulary:
            validate_token(tok)


def corrupt(truth: list[str], spec: ChannelSpec, seed: int, utt_id: str) -> list[str]:
    """Push the truth tokens through one noisy channel, deterministically."""
    out: list[str] = []
    for pos, tok in enumerate(truth):
        rng = _rng(seed, "ch", spec.source_id, utt_id, pos)
        u = rng.random()
        if u < spec.sub_rate:
            candidates = [w for w in spec.vocabulary if w != tok] or list(spec.vocabulary)
            out.append(rng.choice(candidates))
        elif u < spec.sub_rate + spec.del_rate:
            pass
        else:
            out.append(tok)
        if rng.random() < spec.ins_rate:
            out.append(rng.choice(spec.vocabulary))
    return out


@dataclass
class SynthCorpus:
    records: list[UtteranceRecord]
    truth: dict[str, str]
    hypotheses: dict[str, dict[str, str]]  # source_id -> utt_id -> text

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        """Write manifest, truth TSV, and one hypothesis TSV per channel."""
        from .core import write_manifest

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths: dict[str, Path] = {"manifest": out / "manifest.jsonl", "truth": out / "truth.tsv"}
        write_manifest(self.records, paths["manifest"])
        with open(paths["truth"], "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.records:
                fh.write(f"{rec.utt_id}\t{self.truth[rec.utt_id]}\n")
        for source_id, table in sorted(self.hypotheses.items()):
            path = out / f"hyp_{source_id}.tsv"
            paths[source_id] = path
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                for rec in self.records:
                    fh.write(f"{rec.utt_id}\t{table[rec.utt_id]}\n")
        return paths


def generate(
    n_utts: int,
    channels: list[ChannelSpec],
    *,
    seed: int = 0,
    truth_len: int = 10,
    vocabulary: tuple[str, ...] = DEFAULT_VOCABULARY,
    domain: str = "synthetic",
) -> SynthCorpus:
    """Build a corpus of *n_utts* utterances observed through each channel."""
    if n_utts < 1:
        raise ValueError(f"n_utts must be >= 1, got {n_utts}")
    if truth_len < 1:
        raise ValueError(f"truth_len must be >= 1, got {truth_len}")
    ids = [spec.source_id for spec in channels]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate channel source ids: {ids}")
    records: list[UtteranceRecord] = []
    truth: dict[str, str] = {}
    hypotheses: dict[str, dict[str, str]] = {spec.source_id: {} for spec in channels}
    lo = max(1, truth_len // 2)
    for i in range(n_utts):
        utt_id = f"utt_{i:05d}"
        length = _rng(seed, "len", utt_id).randint(lo, truth_len)
        tokens = [
            _rng(seed, "truth", utt_id, pos).choice(vocabulary) for pos in range(length)
        ]
        text = " ".join(tokens)
        truth[utt_id] = text
        records.append(
            UtteranceRecord(
                utt_id=utt_id,
                audio_ref=f"synthetic://{utt_id}.wav",
                duration_s=round(0.4 * length, 2),
                domain=domain,
                reference_text=text,
            )
        )
        for spec in channels:
            hypotheses[spec.source_id][utt_id] = " ".join(corrupt(tokens, spec, seed, utt_id))
    return SynthCorpus(records=records, truth=truth, hypotheses=hypotheses)
