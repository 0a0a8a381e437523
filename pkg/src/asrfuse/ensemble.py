"""Three-system fusion: agreement gate, ranking, arbitration, pipeline driver.

The pipeline runs in two phases with a corpus-wide barrier between them:
phase one transcribes and gates every utterance (optionally refining the
second-pass-capable system), then the surviving disagreements are used
to rank the systems, and phase two aligns and arbitrates each of them.
Outputs always come back in manifest order, whatever the worker count.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import confnet
from .alignment import Anchor, ConfusionNetwork, align_pair, align_third, mark_confusion_regions
from .backends import BackendError, Transcriber
from .core import ConfigError, Hypothesis, PipelineConfig, UtteranceRecord
from .metrics import cer_pair

log = logging.getLogger(__name__)

RESOLVED_BY = ("unanimous", "third_agrees_first", "third_agrees_second", "fallback_first")

STAGE_GATE = "gate"
STAGE_ARBITRATION = "arbitration"


@dataclass(frozen=True)
class GateDecision:
    """Outcome of the perfect-match gate for one utterance."""

    utt_id: str
    resolved: bool
    tokens: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.resolved and self.tokens is None:
            raise ValueError("resolved gate decision needs the agreed tokens")
        if not self.resolved and self.tokens is not None:
            raise ValueError("unresolved gate decision must not carry tokens")


@dataclass(frozen=True)
class RankedTriple:
    """Source ids ordered best-first plus the average CER behind the order."""

    order: tuple[str, str, str]
    avg_cer: Mapping[str, float]


@dataclass(frozen=True)
class RegionResolution:
    resolved_by: str
    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.resolved_by not in RESOLVED_BY:
            raise ValueError(f"unknown resolution label {self.resolved_by!r}")


@dataclass(frozen=True)
class EnsembleOutput:
    """Final pseudo-label for one utterance with its provenance."""

    utt_id: str
    final_tokens: tuple[str, ...]
    stage: str
    confusion_net: ConfusionNetwork
    region_trace: tuple[RegionResolution, ...] = ()

    @property
    def text(self) -> str:
        return " ".join(self.final_tokens)


def _ordered(hyps: Sequence[Hypothesis], cfg: PipelineConfig) -> list[Hypothesis]:
    return sorted(hyps, key=lambda h: cfg.priority_key(h.source_id))


def _check_sources(hyps: Sequence[Hypothesis]) -> None:
    ids = [h.source_id for h in hyps]
    if len(ids) != 3:
        raise ConfigError(f"fusion needs exactly 3 hypotheses, got {len(ids)}")
    if len(set(ids)) != 3:
        raise ConfigError(f"duplicate source ids in {ids}")


def pairwise_cers(hyps: Sequence[Hypothesis], *, norm: str = "max") -> dict[tuple[str, str], float]:
    """CER for each unordered source pair, keyed by the sorted id pair."""
    _check_sources(hyps)
    out: dict[tuple[str, str], float] = {}
    for i in range(3):
        for j in range(i + 1, 3):
            a, b = hyps[i], hyps[j]
            key = tuple(sorted((a.source_id, b.source_id)))
            if key[0] != a.source_id:
                a, b = b, a
            out[key] = cer_pair(a, b, norm=norm)
    return out


def perfect_match_gate(
    hyps: Sequence[Hypothesis],
    cfg: PipelineConfig,
    utt_id: str = "",
    cers: Mapping[tuple[str, str], float] | None = None,
) -> GateDecision:
    """Resolve the utterance outright when the systems already agree.

    gate_mode="all_pairs" requires every pairwise CER to be within
    cer_zero_epsilon; "anchor_pairs" only checks the pairs involving the
    highest-priority source.  The agreed tokens are taken from the
    highest-priority hypothesis (under the default epsilon of zero all
    three are identical anyway).
    """
    _check_sources(hyps)
    if cers is None:
        cers = pairwise_cers(hyps, norm=cfg.cer_norm)
    ordered = _ordered(hyps, cfg)
    if cfg.gate_mode == "anchor_pairs":
        anchor = ordered[0].source_id
        checked = [v for (x, y), v in cers.items() if anchor in (x, y)]
    else:
        checked = list(cers.values())
    if all(v <= cfg.cer_zero_epsilon for v in checked):
        return GateDecision(utt_id=utt_id, resolved=True, tokens=ordered[0].tokens)
    return GateDecision(utt_id=utt_id, resolved=False)


def rank_asrs(
    cer_maps: Sequence[Mapping[tuple[str, str], float]],
    *,
    priority: tuple[str, ...] = (),
) -> RankedTriple:
    """Order sources by their average pairwise CER over disagreeing utterances.

    Each element of *cer_maps* holds one utterance's three pairwise CERs.
    A source's score is the mean of every CER it participates in.  Ties
    break by the configured priority, then alphabetically.
    """
    if not cer_maps:
        raise ValueError("cannot rank systems without any disagreeing utterances")
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for cers in cer_maps:
        for (x, y), value in cers.items():
            for sid in (x, y):
                sums[sid] = sums.get(sid, 0.0) + value
                counts[sid] = counts.get(sid, 0) + 1
    if len(sums) != 3:
        raise ValueError(f"expected 3 sources in CER maps, saw {sorted(sums)}")
    avg = {sid: sums[sid] / counts[sid] for sid in sums}

    def key(sid: str) -> tuple:
        try:
            pri = (priority.index(sid), sid)
        except ValueError:
            pri = (len(priority), sid)
        return (avg[sid],) + pri

    order = tuple(sorted(avg, key=key))
    return RankedTriple(order=order, avg_cer=avg)  # type: ignore[arg-type]


def arbitrate(net: ConfusionNetwork, utt_id: str = "") -> EnsembleOutput:
    """Resolve every region of a completed network into final tokens.

    Per region: the third alternative confirms the first or the second
    one when it matches it; a region whose first two alternatives agree
    (a demoted anchor) is unanimous; anything else falls back to the
    first system.
    """
    if not net.has_third:
        raise ValueError("arbitration needs a network with third alternatives")
    final: list[str] = []
    trace: list[RegionResolution] = []
    for seg in net.segments:
        if isinstance(seg, Anchor):
            final.append(seg.token)
            continue
        if seg.alt3 == seg.alt1:
            chosen, why = seg.alt1, "third_agrees_first"
        elif seg.alt3 == seg.alt2:
            chosen, why = seg.alt2, "third_agrees_second"
        elif seg.alt1 == seg.alt2:
            chosen, why = seg.alt1, "unanimous"
        else:
            chosen, why = seg.alt1, "fallback_first"
        final.extend(chosen)
        trace.append(RegionResolution(resolved_by=why, tokens=chosen))
    return EnsembleOutput(
        utt_id=utt_id,
        final_tokens=tuple(final),
        stage=STAGE_ARBITRATION,
        confusion_net=net,
        region_trace=tuple(trace),
    )


def _anchors_only(tokens: Sequence[str]) -> ConfusionNetwork:
    return ConfusionNetwork(segments=tuple(Anchor(tok) for tok in tokens))


@dataclass(frozen=True)
class UtteranceFailure:
    utt_id: str
    errors: tuple[str, ...]
    all_failed: bool


@dataclass
class PipelineStats:
    total: int = 0
    resolved: int = 0
    arbitrated: int = 0
    failed: int = 0
    second_pass_used: int = 0
    ranking: tuple[str, ...] | None = None
    avg_cer: dict[str, float] | None = None
    failures: list[UtteranceFailure] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "resolved": self.resolved,
            "arbitrated": self.arbitrated,
            "failed": self.failed,
            "second_pass_used": self.second_pass_used,
            "ranking": list(self.ranking) if self.ranking else None,
            "avg_cer": {k: self.avg_cer[k] for k in sorted(self.avg_cer)} if self.avg_cer else None,
            "failures": [
                {"utt_id": f.utt_id, "errors": list(f.errors), "all_failed": f.all_failed}
                for f in self.failures
            ],
        }


@dataclass
class PipelineResult:
    outputs: list[EnsembleOutput]
    stats: PipelineStats


@dataclass
class _Phase1:
    utt: UtteranceRecord
    hyps: list[Hypothesis] | None = None
    cers: dict[tuple[str, str], float] | None = None
    gate: GateDecision | None = None
    failure: UtteranceFailure | None = None
    used_second_pass: bool = False


def _second_pass_backend(backends: Sequence[Transcriber], cfg: PipelineConfig) -> Transcriber | None:
    capable = [b for b in backends if b.supports_second_pass]
    if not capable:
        return None
    return sorted(capable, key=lambda b: cfg.priority_key(b.source_id))[0]


def _validate_backends(backends: Sequence[Transcriber]) -> None:
    ids = [b.source_id for b in backends]
    if len(ids) != 3:
        raise ConfigError(f"the pipeline fuses exactly 3 systems, got {len(ids)}")
    if len(set(ids)) != 3:
        raise ConfigError(f"backend source ids must be distinct, got {ids}")


def run_pipeline(
    manifest: Sequence[UtteranceRecord] | str | Path,
    backends: Sequence[Transcriber],
    cfg: PipelineConfig = PipelineConfig(),
    *,
    workers: int = 1,
) -> PipelineResult:
    """Fuse three systems' transcripts for every utterance in the manifest.

    Backend failures (after the backend's own retries) fail only the
    affected utterance; it is recorded in stats and skipped in the
    output stream.
    """
    from .core import read_manifest  # local import keeps module load light

    if isinstance(manifest, (str, Path)):
        records: Sequence[UtteranceRecord] = read_manifest(manifest)
    else:
        records = manifest
    _validate_backends(backends)
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    stats = PipelineStats(total=len(records))
    second = _second_pass_backend(backends, cfg)

    def phase1(utt: UtteranceRecord) -> _Phase1:
        state = _Phase1(utt=utt)
        hyps: list[Hypothesis] = []
        errors: list[str] = []
        for backend in backends:
            try:
                hyps.append(backend.transcribe(utt))
            except BackendError as exc:
                errors.append(f"{backend.source_id}: {exc}")
        if errors:
            state.failure = UtteranceFailure(
                utt_id=utt.utt_id, errors=tuple(errors), all_failed=len(errors) == len(backends)
            )
            return state
        cers = pairwise_cers(hyps, norm=cfg.cer_norm)
        gate = perfect_match_gate(hyps, cfg, utt.utt_id, cers)
        if not gate.resolved and second is not None:
            try:
                refined = second.second_pass(utt, cfg.lm_ref, cfg.n_paths)
            except BackendError as exc:
                log.warning("second pass failed for %s: %s", utt.utt_id, exc)
            else:
                hyps = [refined if h.source_id == refined.source_id else h for h in hyps]
                state.used_second_pass = True
                cers = pairwise_cers(hyps, norm=cfg.cer_norm)
                gate = perfect_match_gate(hyps, cfg, utt.utt_id, cers)
        state.hyps = hyps
        state.cers = cers
        state.gate = gate
        return state

    if workers == 1:
        phase1_results = [phase1(utt) for utt in records]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            phase1_results = list(pool.map(phase1, records))

    disagreeing = [s.cers for s in phase1_results if s.gate is not None and not s.gate.resolved]
    ranking: RankedTriple | None = None
    if disagreeing and cfg.rank_scope == "corpus":
        ranking = rank_asrs(disagreeing, priority=cfg.priority)
        stats.ranking = ranking.order
        stats.avg_cer = dict(ranking.avg_cer)

    def phase2(state: _Phase1) -> EnsembleOutput | None:
        if state.failure is not None:
            return None
        assert state.gate is not None and state.hyps is not None
        if state.gate.resolved:
            return EnsembleOutput(
                utt_id=state.utt.utt_id,
                final_tokens=state.gate.tokens,
                stage=STAGE_GATE,
                confusion_net=_anchors_only(state.gate.tokens),
            )
        if cfg.rank_scope == "utterance":
            order = rank_asrs([state.cers], priority=cfg.priority).order
        else:
            assert ranking is not None
            order = ranking.order
        by_id = {h.source_id: h for h in state.hyps}
        h1, h2, h3 = (by_id[sid] for sid in order)
        net = mark_confusion_regions(align_pair(h1.tokens, h2.tokens))
        net = align_third(net, h3.tokens)
        return arbitrate(net, utt_id=state.utt.utt_id)

    if workers == 1:
        phase2_results = [phase2(s) for s in phase1_results]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            phase2_results = list(pool.map(phase2, phase1_results))

    outputs: list[EnsembleOutput] = []
    for state, out in zip(phase1_results, phase2_results):
        stats.second_pass_used += int(state.used_second_pass)
        if out is None:
            stats.failed += 1
            stats.failures.append(state.failure)
            continue
        if out.stage == STAGE_GATE:
            stats.resolved += 1
        else:
            stats.arbitrated += 1
        outputs.append(out)
    return PipelineResult(outputs=outputs, stats=stats)


def output_row(out: EnsembleOutput) -> dict:
    """JSON-serializable row for one pseudo-labeled utterance."""
    return {
        "utt_id": out.utt_id,
        "text": out.text,
        "stage": out.stage,
        "resolution": [
            {"resolved_by": r.resolved_by, "tokens": list(r.tokens)} for r in out.region_trace
        ],
        "confnet": confnet.render(out.confusion_net),
    }


def write_outputs(outputs: Iterable[EnsembleOutput], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for out in outputs:
            fh.write(json.dumps(output_row(out), ensure_ascii=False) + "\n")


def write_stats(stats: PipelineStats, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(stats.to_dict(), ensure_ascii=False, indent=2) + "\n")
