"""Command-line entry point tying the pipeline together.

Subcommands: label (pseudo-label a manifest), make-data (emit
instruction-tuning records), eval (WER reports), render-confnet,
parse-confnet, and synth (deterministic synthetic corpora).

Exit codes: 0 on success, 2 on configuration errors, 3 when the
fraction of failed utterances exceeds the configured threshold.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from . import confnet, datagen, ensemble, synthcorpus
from .alignment import Anchor, ConfusionNetwork, align_pair, align_third, mark_confusion_regions
from .backends import (
    BackendDescriptor,
    BackendError,
    Corrector,
    CorrectionRequest,
    FileCorrector,
    HttpCorrector,
    build_transcriber,
    llm_correct,
)
from .core import DEFAULT_NORMALIZER, ConfigError, ManifestError, PipelineConfig, read_manifest
from .metrics import ReportAccumulator

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3

MODES = ("ensemble", "textual_llm", "speech_llm")


@dataclass
class RunConfig:
    manifest: str
    backends: list[BackendDescriptor]
    pipeline: PipelineConfig
    out_dir: str = "out"
    mode: str = "ensemble"
    workers: int = 1
    report: str = "csv"
    max_failure_fraction: float = 0.0
    corrector: Mapping | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.report not in ("csv", "md"):
            raise ConfigError(f"report must be 'csv' or 'md', got {self.report!r}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not 0.0 <= self.max_failure_fraction <= 1.0:
            raise ConfigError(
                f"max_failure_fraction must be in [0, 1], got {self.max_failure_fraction}"
            )


def load_run_config(path: str, overrides: Mapping) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    known = {
        "manifest", "backends", "pipeline", "out_dir", "mode", "workers",
        "report", "max_failure_fraction", "corrector",
    }
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    for key, value in overrides.items():
        if value is not None:
            raw[key] = value
    if "manifest" not in raw:
        raise ConfigError("config needs a manifest path")
    backends = [BackendDescriptor.from_dict(b) for b in raw.get("backends", [])]
    pipeline = PipelineConfig.from_dict(raw.get("pipeline", {}))
    return RunConfig(
        manifest=raw["manifest"],
        backends=backends,
        pipeline=pipeline,
        out_dir=raw.get("out_dir", "out"),
        mode=raw.get("mode", "ensemble"),
        workers=int(raw.get("workers", 1)),
        report=raw.get("report", "csv"),
        max_failure_fraction=float(raw.get("max_failure_fraction", 0.0)),
        corrector=raw.get("corrector"),
    )


def _build_corrector(spec: Mapping | None) -> Corrector:
    if not spec:
        raise ConfigError("llm modes need a corrector entry in the config")
    kind = spec.get("kind")
    if kind == "http":
        return HttpCorrector(
            spec.get("endpoint"),
            endpoint_env=spec.get("endpoint_env"),
            auth_token_env=spec.get("auth_token_env"),
            timeout_s=float(spec.get("timeout_s", 60.0)),
            audio_mode=spec.get("audio_mode", "ref"),
        )
    if kind == "file_responses":
        if "path" not in spec:
            raise ConfigError("file_responses corrector needs a path")
        return FileCorrector(spec["path"])
    raise ConfigError(f"unknown corrector kind {spec.get('kind')!r}")


def _pipeline_result(cfg: RunConfig) -> ensemble.PipelineResult:
    backends = [build_transcriber(desc, cfg.pipeline.normalizer) for desc in cfg.backends]
    records = read_manifest(cfg.manifest)
    return ensemble.run_pipeline(records, backends, cfg.pipeline, workers=cfg.workers)


def _fail_exit(stats: ensemble.PipelineStats, cfg: RunConfig) -> int:
    if stats.total and stats.failed / stats.total > cfg.max_failure_fraction:
        print(
            f"{stats.failed}/{stats.total} utterances failed "
            f"(threshold {cfg.max_failure_fraction})",
            file=sys.stderr,
        )
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_label(cfg: RunConfig) -> int:
    """Pseudo-label every utterance; llm modes route disagreements to a corrector."""
    result = _pipeline_result(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    corrector = _build_corrector(cfg.corrector) if cfg.mode != "ensemble" else None
    for out in result.outputs:
        row = ensemble.output_row(out)
        if corrector is not None and out.stage == ensemble.STAGE_ARBITRATION:
            req = CorrectionRequest(
                instruction=datagen.build_instruction(out.confusion_net),
                utt_id=out.utt_id,
                audio_ref=_audio_ref_for(cfg, out.utt_id) if cfg.mode == "speech_llm" else None,
                temperature=cfg.pipeline.temperature,
                max_new_tokens=cfg.pipeline.max_new_tokens,
            )
            try:
                corr = llm_correct(corrector, req, cfg.pipeline.normalizer)
            except BackendError as exc:
                row["llm"] = {"fallback": True, "warnings": [f"correction failed: {exc}"]}
            else:
                row["llm"] = {"fallback": corr.fallback, "warnings": list(corr.warnings)}
                if not corr.fallback:
                    row["text"] = corr.text
                    row["stage"] = cfg.mode
        rows.append(row)
    with open(out_dir / "pseudo_labels.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    ensemble.write_stats(result.stats, out_dir / "stats.json")
    print(
        f"labeled {len(rows)} utterances "
        f"(resolved {result.stats.resolved}, arbitrated {result.stats.arbitrated}, "
        f"failed {result.stats.failed}) -> {out_dir}"
    )
    return _fail_exit(result.stats, cfg)


def _audio_ref_for(cfg: RunConfig, utt_id: str) -> str | None:
    # manifest is small at desk scale; re-reading keeps cmd_label stateless
    for rec in read_manifest(cfg.manifest):
        if rec.utt_id == utt_id:
            return rec.audio_ref or None
    return None


def cmd_make_data(cfg: RunConfig, *, val_fraction: float = 0.0, speech: bool = False) -> int:
    """Emit instruction-tuning records plus the training sidecar config."""
    result = _pipeline_result(cfg)
    records = {rec.utt_id: rec for rec in read_manifest(cfg.manifest)}
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    buckets: dict[str, list[datagen.FinetuneRecord]] = {"train": [], "val": []}
    skipped_no_ref = 0
    for out in result.outputs:
        utt = records[out.utt_id]
        if not utt.reference_text:
            skipped_no_ref += 1
            continue
        if speech:
            rec = datagen.make_speech_record(utt, out.confusion_net, normalizer=cfg.pipeline.normalizer)
        else:
            rec = datagen.make_textual_record(utt, out.confusion_net, normalizer=cfg.pipeline.normalizer)
        buckets[datagen.split_for(out.utt_id, val_fraction)].append(rec)
    n_train = datagen.write_records(buckets["train"], out_dir / "train.jsonl")
    n_val = 0
    if val_fraction > 0.0:
        n_val = datagen.write_records(buckets["val"], out_dir / "val.jsonl")
    datagen.emit_finetune_config(cfg.pipeline, out_dir / "finetune_config.txt")
    print(
        f"wrote {n_train} train / {n_val} val records "
        f"(skipped {skipped_no_ref} without reference) -> {out_dir}"
    )
    return _fail_exit(result.stats, cfg)


def _load_keyed_texts(path: str) -> tuple[dict[str, str], dict[str, str]]:
    """Read utt_id -> text from TSV or JSONL, plus utt_id -> domain when present."""
    texts: dict[str, str] = {}
    domains: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.lstrip().startswith("{"):
                row = json.loads(line)
                utt_id = row.get("utt_id")
                if not utt_id:
                    raise ConfigError(f"{path}:{lineno}: row without utt_id")
                text = row.get("text", row.get("reference_text"))
                if text is None:
                    raise ConfigError(f"{path}:{lineno}: row without text or reference_text")
                texts[utt_id] = text
                if row.get("domain"):
                    domains[utt_id] = row["domain"]
            else:
                utt_id, sep, text = line.partition("\t")
                if not sep:
                    raise ConfigError(f"{path}:{lineno}: expected utt_id<TAB>text")
                texts[utt_id] = text
    return texts, domains


def cmd_eval(
    refs_path: str,
    hyp_specs: Sequence[str],
    *,
    group_by: str = "domain",
    out_dir: str | None = None,
    report: str = "csv",
) -> int:
    """Score one or more systems against references, micro-averaged per dataset."""
    if group_by not in ("domain", "none"):
        raise ConfigError(f"group_by must be 'domain' or 'none', got {group_by!r}")
    if report not in ("csv", "md"):
        raise ConfigError(f"report must be 'csv' or 'md', got {report!r}")
    refs, domains = _load_keyed_texts(refs_path)
    systems: list[tuple[str, dict[str, str]]] = []
    for spec in hyp_specs:
        name, sep, path = spec.partition("=")
        if not sep:
            raise ConfigError(f"--hyp expects NAME=PATH, got {spec!r}")
        texts, _ = _load_keyed_texts(path)
        systems.append((name, texts))
    if not systems:
        raise ConfigError("eval needs at least one --hyp NAME=PATH")
    acc = ReportAccumulator()
    for utt_id, ref_text in refs.items():
        dataset = domains.get(utt_id, "all") if group_by == "domain" else "all"
        ref = DEFAULT_NORMALIZER(ref_text)
        for name, texts in systems:
            hyp_text = texts.get(utt_id)
            acc.add(
                dataset,
                name,
                ref,
                DEFAULT_NORMALIZER(hyp_text) if hyp_text is not None else None,
            )
    rep = acc.report()
    rendered = rep.to_csv() if report == "csv" else rep.to_markdown()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        target = out / ("report.csv" if report == "csv" else "report.md")
        target.write_text(rendered, encoding="utf-8")
        print(f"wrote {target}")
    sys.stdout.write(rendered)
    return EXIT_OK


def cmd_render_confnet(first: str, second: str, third: str | None) -> int:
    net = mark_confusion_regions(align_pair(DEFAULT_NORMALIZER(first), DEFAULT_NORMALIZER(second)))
    if third is None:
        print(confnet.render(net, omit_missing_third=True))
    else:
        print(confnet.render(align_third(net, DEFAULT_NORMALIZER(third))))
    return EXIT_OK


def _net_jsonable(net: ConfusionNetwork) -> list[dict]:
    out: list[dict] = []
    for seg in net.segments:
        if isinstance(seg, Anchor):
            out.append({"anchor": seg.token})
        else:
            row = {"alt1": list(seg.alt1), "alt2": list(seg.alt2)}
            if seg.alt3 is not None:
                row["alt3"] = list(seg.alt3)
            out.append(row)
    return out


def cmd_parse_confnet(text: str | None) -> int:
    if text is None:
        text = sys.stdin.read()
    net = confnet.parse(text.strip("\n"))
    print(json.dumps({"segments": _net_jsonable(net)}, ensure_ascii=False, indent=2))
    return EXIT_OK


def _parse_channel(spec: str) -> synthcorpus.ChannelSpec:
    """Parse 'id:sub=0.3,del=0.1,ins=0.05' into a ChannelSpec."""
    source_id, sep, rates = spec.partition(":")
    if not source_id:
        raise ConfigError(f"channel spec needs a source id: {spec!r}")
    kwargs: dict[str, float] = {}
    if sep and rates:
        for part in rates.split(","):
            key, eq, value = part.partition("=")
            if not eq or key not in ("sub", "del", "ins"):
                raise ConfigError(f"bad channel rate {part!r} in {spec!r}")
            try:
                kwargs[key + "_rate"] = float(value)
            except ValueError:
                raise ConfigError(f"bad channel rate value {value!r} in {spec!r}") from None
    try:
        return synthcorpus.ChannelSpec(source_id=source_id, **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_synth(out_dir: str, n_utts: int, channels: Sequence[str], seed: int, truth_len: int) -> int:
    specs = [_parse_channel(c) for c in channels]
    if not specs:
        raise ConfigError("synth needs at least one --channel")
    corpus = synthcorpus.generate(n_utts, specs, seed=seed, truth_len=truth_len)
    paths = corpus.write(out_dir)
    print(f"wrote {n_utts} utterances x {len(specs)} channels -> {paths['manifest'].parent}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asrfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    label = sub.add_parser("label", help="fuse three systems into pseudo-labels")
    label.add_argument("--config", required=True, help="run config JSON")
    label.add_argument("--manifest", help="override manifest path")
    label.add_argument("--mode", choices=MODES, help="override labeling mode")
    label.add_argument("--out", dest="out_dir", help="override output directory")
    label.add_argument("--workers", type=int, help="override worker count")

    mkdata = sub.add_parser("make-data", help="emit instruction-tuning records")
    mkdata.add_argument("--config", required=True)
    mkdata.add_argument("--manifest", help="override manifest path")
    mkdata.add_argument("--out", dest="out_dir", help="override output directory")
    mkdata.add_argument("--workers", type=int, help="override worker count")
    mkdata.add_argument("--speech", action="store_true", help="emit speech records with audio_path")
    mkdata.add_argument("--val-fraction", type=float, default=0.0)

    ev = sub.add_parser("eval", help="WER report for one or more systems")
    ev.add_argument("--refs", required=True, help="references: manifest JSONL or utt_id TSV")
    ev.add_argument("--hyp", action="append", default=[], metavar="NAME=PATH",
                    help="system name and hypothesis file; repeatable")
    ev.add_argument("--group-by", choices=("domain", "none"), default="domain")
    ev.add_argument("--out", dest="out_dir", help="directory for the report file")
    ev.add_argument("--report", choices=("csv", "md"), default="csv")

    rc = sub.add_parser("render-confnet", help="align three transcripts and print the network")
    rc.add_argument("--first", required=True)
    rc.add_argument("--second", required=True)
    rc.add_argument("--third", help="omit to render the two-way form")

    pc = sub.add_parser("parse-confnet", help="parse a rendered network to JSON")
    pc.add_argument("text", nargs="?", help="rendered network; reads stdin when omitted")

    sy = sub.add_parser("synth", help="generate a deterministic synthetic corpus")
    sy.add_argument("--out", dest="out_dir", required=True)
    sy.add_argument("--n-utts", type=int, default=100)
    sy.add_argument("--channel", action="append", default=[], metavar="ID:sub=X,del=Y,ins=Z")
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--truth-len", type=int, default=10)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "label":
            cfg = load_run_config(
                args.config,
                {"manifest": args.manifest, "mode": args.mode, "out_dir": args.out_dir,
                 "workers": args.workers},
            )
            return cmd_label(cfg)
        if args.command == "make-data":
            cfg = load_run_config(
                args.config,
                {"manifest": args.manifest, "out_dir": args.out_dir, "workers": args.workers},
            )
            return cmd_make_data(cfg, val_fraction=args.val_fraction, speech=args.speech)
        if args.command == "eval":
            return cmd_eval(
                args.refs, args.hyp, group_by=args.group_by, out_dir=args.out_dir, report=args.report
            )
        if args.command == "render-confnet":
            return cmd_render_confnet(args.first, args.second, args.third)
        if args.command == "parse-confnet":
            return cmd_parse_confnet(args.text)
        if args.command == "synth":
            return cmd_synth(args.out_dir, args.n_utts, args.channel, args.seed, args.truth_len)
        raise AssertionError(f"unhandled command {args.command}")
    except (ConfigError, ManifestError, datagen.DatagenError) as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except confnet.ConfnetParseError as exc:
        print(json.dumps({"error": "parse", "message": str(exc), "offset": exc.offset}),
              file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
