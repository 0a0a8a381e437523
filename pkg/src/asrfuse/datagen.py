"""Instruction-tuning data for correction models, plus the training sidecar.

Records pair a rendered confusion network (inside the instruction) with
the normalized reference transcript as the target.  The reference never
appears in the instruction; only the systems' disagreement does.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from . import confnet
from .alignment import ConfusionNetwork
from .core import DEFAULT_NORMALIZER, PipelineConfig, TextNormalizer, UtteranceRecord

DEFAULT_INSTRUCTION_TEMPLATE = (
    "Use the text provided and correct the mistakes made by ASR. "
    "For better reliability 3 ASRs are used for transcription and the low "
    "confidence regions are marked as confusion regions within different "
    "brackets `{confnet}`"
)


class DatagenError(ValueError):
    pass


def _check_template(template: str) -> None:
    if template.count("{confnet}") != 1:
        raise DatagenError("instruction template needs exactly one {confnet} slot")
    if template.count("`") != 2 or "`{confnet}`" not in template:
        raise DatagenError("the {confnet} slot must be the template's only backticked span")


def build_instruction(net: ConfusionNetwork, template: str = DEFAULT_INSTRUCTION_TEMPLATE) -> str:
    """Fill the template's backticked slot with the rendered network."""
    _check_template(template)
    if not net.has_third:
        raise DatagenError("instruction needs a network with third alternatives")
    return template.replace("{confnet}", confnet.render(net))


@dataclass(frozen=True)
class FinetuneRecord:
    """One training example; audio_path is only present for speech records."""

    instruction: str
    response: str
    audio_path: str | None = None

    def to_json(self) -> str:
        row: dict = {}
        if self.audio_path is not None:
            row["audio_path"] = self.audio_path
        row["instruction"] = self.instruction
        row["response"] = self.response
        return json.dumps(row, ensure_ascii=False)


def make_textual_record(
    utt: UtteranceRecord,
    net: ConfusionNetwork,
    *,
    template: str = DEFAULT_INSTRUCTION_TEMPLATE,
    normalizer: TextNormalizer = DEFAULT_NORMALIZER,
) -> FinetuneRecord:
    """Text-only record: instruction with the rendered network, normalized reference as target."""
    if not utt.reference_text:
        raise DatagenError(f"{utt.utt_id}: cannot build a training record without reference_text")
    return FinetuneRecord(
        instruction=build_instruction(net, template),
        response=normalizer.text(utt.reference_text),
    )


def make_speech_record(
    utt: UtteranceRecord,
    net: ConfusionNetwork,
    *,
    template: str = DEFAULT_INSTRUCTION_TEMPLATE,
    normalizer: TextNormalizer = DEFAULT_NORMALIZER,
    require_audio_file: bool = False,
) -> FinetuneRecord:
    """Speech record: like the textual one but keyed to the utterance audio."""
    if not utt.audio_ref:
        raise DatagenError(f"{utt.utt_id}: speech record needs an audio_ref")
    if require_audio_file and not Path(utt.audio_ref).exists():
        raise DatagenError(f"{utt.utt_id}: audio file not found: {utt.audio_ref}")
    base = make_textual_record(utt, net, template=template, normalizer=normalizer)
    return FinetuneRecord(
        instruction=base.instruction, response=base.response, audio_path=utt.audio_ref
    )


def split_for(utt_id: str, val_fraction: float, salt: str = "split") -> str:
    """Deterministic train/val assignment from a hash of the utterance id."""
    if not 0.0 <= val_fraction <= 1.0:
        raise DatagenError(f"val_fraction must be in [0, 1], got {val_fraction}")
    digest = hashlib.sha256(f"{salt}:{utt_id}".encode("utf-8")).digest()
    bucket = int.from_bytes(digest[:4], "big") / 2**32
    return "val" if bucket < val_fraction else "train"


def write_records(records: Iterable[FinetuneRecord], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
            n += 1
    return n


@dataclass(frozen=True)
class FinetuneDefaults:
    """Adapter and optimizer settings emitted alongside every dataset."""

    rank: int = 32
    alpha: int = 128
    dropout: float = 0.05
    quantization_bits: int = 4
    per_device_batch_size: int = 4
    gradient_accumulation_steps: int = 8
    num_devices: int = 4
    learning_rate: str = "2e-4"
    lr_schedule: str = "cosine"
    warmup_fraction: float = 0.2
    epochs_min: int = 10
    epochs_max: int = 15
    optimizer: str = "adamw"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: str = "1e-8"
    weight_decay: float = 0.0

    @property
    def effective_batch_size(self) -> int:
        return self.per_device_batch_size * self.gradient_accumulation_steps * self.num_devices


def emit_finetune_config(
    cfg: PipelineConfig,
    path: str | Path,
    defaults: FinetuneDefaults = FinetuneDefaults(),
) -> None:
    """Write the flat key = value sidecar a training job consumes."""
    d = defaults
    lines = [
        f"lora.rank = {d.rank}",
        f"lora.alpha = {d.alpha}",
        f"lora.dropout = {d.dropout}",
        f"lora.quantization_bits = {d.quantization_bits}",
        f"train.per_device_batch_size = {d.per_device_batch_size}",
        f"train.gradient_accumulation_steps = {d.gradient_accumulation_steps}",
        f"train.num_devices = {d.num_devices}",
        f"train.effective_batch_size = {d.effective_batch_size}",
        f"train.learning_rate = {d.learning_rate}",
        f"train.lr_schedule = {d.lr_schedule}",
        f"train.warmup_fraction = {d.warmup_fraction}",
        f"train.epochs_min = {d.epochs_min}",
        f"train.epochs_max = {d.epochs_max}",
        f"train.optimizer = {d.optimizer}",
        f"train.adam_beta1 = {d.adam_beta1}",
        f"train.adam_beta2 = {d.adam_beta2}",
        f"train.adam_epsilon = {d.adam_epsilon}",
        f"train.weight_decay = {d.weight_decay}",
        "inference.decoding = greedy",
        f"inference.temperature = {cfg.temperature:g}",
        f"inference.max_new_tokens = {cfg.max_new_tokens}",
        f"decode.n_paths = {cfg.n_paths}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_flat_config(text: str) -> dict[str, str]:
    """Read key = value lines back into a dict (comments and blanks skipped)."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DatagenError(f"line {lineno}: expected key = value, got {line!r}")
        out[key.strip()] = value.strip()
    return out
