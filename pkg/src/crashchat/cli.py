"""Command-line entry point: ``crashchat <command> ...``.

Every command exits 0 only when it fully succeeds.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import torch
import yaml

from . import experiment as ex
from .datasetkit import (
    SplitSpec,
    SyntheticConfig,
    build_qa_pairs,
    generate_synthetic,
    ingest_manifest,
    load_split,
    save_corpus,
    save_split,
    stratified_split,
)
from .metrics import EvalConfig, evaluate_run
from .model import build_model, checkpoint_payload, model_from_payload, read_checkpoint
from .pipeline import CrashChat, predict
from .schema import ALL_TASKS, PredictionRecord, TaskGroup, TaskId, parse_task_list, read_jsonl, write_jsonl
from .training import Regime, RegimeKind, assemble_crashchat, train_regime

log = logging.getLogger("crashchat")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _set_nested(d: dict[str, Any], dotted: str, value: Any) -> None:
    *path, leaf = dotted.split(".")
    for key in path:
        d = d.setdefault(key, {})
    d[leaf] = value


def apply_overrides(cfg: ex.ExperimentConfig, overrides: Sequence[str]) -> ex.ExperimentConfig:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    if not overrides:
        return cfg
    d = cfg.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        _set_nested(d, key.strip(), yaml.safe_load(raw))
    return ex.ExperimentConfig.from_dict(d)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_dataset(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if args.action == "synth":
        cfg = SyntheticConfig(num_positive=args.positives, num_negative=args.negatives, seed=args.seed)
        corpus = generate_synthetic(cfg)
        save_corpus(corpus, out)
        print(f"wrote {len(corpus.samples)} synthetic videos to {out}")
        return 0
    if args.input is None:
        raise SystemExit(f"dataset {args.action} needs --input MANIFEST")
    corpus = ingest_manifest(args.input, args.feature_dim)
    for err in corpus.errors:
        log.warning("line %d (%s): %s", err.line, err.video_id, err.reason)
    if args.action == "ingest":
        save_corpus(corpus, out)
        print(f"ingested {len(corpus.samples)} videos, rejected {len(corpus.errors)}")
    elif args.action == "qa":
        pairs = build_qa_pairs(corpus.samples, corpus.texts)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_jsonl(out, pairs)
        print(f"wrote {len(pairs)} QA pairs to {out}")
    else:
        split = stratified_split(corpus.samples, SplitSpec(args.ratios, args.seed))
        save_split(split, corpus, out)
        print(" ".join(f"{n}={len(s)}" for n, s in zip(("train", "val", "test"), split)))
    return 1 if corpus.errors and args.strict else 0


def _regime(args: argparse.Namespace) -> Regime:
    kind = RegimeKind(args.regime)
    if kind is RegimeKind.INDEPENDENT:
        if not args.task:
            raise SystemExit("--regime independent needs --task")
        return Regime.independent(TaskId.parse(args.task))
    if kind is RegimeKind.HOMOGENEOUS:
        if not args.group:
            raise SystemExit("--regime homogeneous needs --group")
        return Regime.homogeneous(args.group)
    return Regime.heterogeneous()


def cmd_train(args: argparse.Namespace) -> int:
    cfg = apply_overrides(ex.load_config(args.config), args.set)
    regime = _regime(args)
    splits = load_split(args.dataset)
    if args.init:
        init = read_checkpoint(args.init)
    else:
        raw_dim = splits["train"].samples[0].feature_dim
        init = checkpoint_payload(build_model(**cfg.backbone(raw_dim)))
    torch.set_num_threads(1)
    res = train_regime(cfg.train.params(regime.kind).train_config(regime, cfg.seed), init,
                       splits["train"], splits["val"], log_every=1 if args.verbose else 0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = res.payload()
    payload["meta"]["configHash"] = cfg.config_hash()
    torch.save(payload, out)
    res.write_log(out.with_suffix(".csv"))
    print(f"{regime.name}: best epoch {res.best_epoch}, val loss {res.best_val_loss:.4f} -> {out}")
    return 0


def cmd_assemble(args: argparse.Namespace) -> int:
    payload = assemble_crashchat(read_checkpoint(args.hetero), read_checkpoint(args.homo_pc))
    torch.save(payload, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    corpus = load_split(args.dataset)[args.split]
    chat = CrashChat(model_from_payload(read_checkpoint(args.checkpoint)), max_new_tokens=args.max_new_tokens)
    preds = predict(chat, corpus.samples, parse_task_list(args.tasks))
    write_jsonl(args.out, preds)
    counts = chat.invocations
    print(f"wrote {len(preds)} predictions; invocations Lc={counts['Lc']} Pc={counts['Pc']}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    corpus = load_split(args.dataset)[args.split]
    refs = {(q.video_id, q.task): q.reference_answer for q in build_qa_pairs(corpus.samples, corpus.texts)}
    preds = [PredictionRecord.from_json(o) for o in read_jsonl(args.predictions)]
    report = evaluate_run(preds, corpus.samples, refs, EvalConfig(args.delta, args.ap_thresholds))
    text = json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = apply_overrides(ex.load_config(args.config), args.set)
    stages = args.stages.split(",") if args.stages else None
    res = ex.run_experiment(cfg, args.out, stages, args.force)
    if not res.ok:
        print(f"run failed at stage {res.failed_stage}: {res.error}", file=sys.stderr)
        return 1
    print(f"run complete: {res.run_dir} ({', '.join(res.completed)})")
    table = res.run_dir / "comparison.txt"
    if table.exists() and (stages is None or "report" in stages):
        print(table.read_text(), end="")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    reports = ex.load_reports(Path(args.run_dir) / "metrics")
    if not reports:
        print(f"no metrics under {args.run_dir}", file=sys.stderr)
        return 1
    print(ex.comparison_table(reports), end="")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crashchat", description="Crash video QA: data, training, gated inference, metrics.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", help="ingest, synthesize, expand to QA pairs, or split")
    d.add_argument("action", choices=("ingest", "synth", "qa", "split"))
    d.add_argument("--input", help="manifest JSONL (ingest/qa/split)")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--ratios", type=_floats, default=(0.8, 0.1, 0.1))
    d.add_argument("--positives", type=int, default=200)
    d.add_argument("--negatives", type=int, default=200)
    d.add_argument("--feature-dim", type=int, default=16)
    d.add_argument("--strict", action="store_true", help="fail if any manifest entry is rejected")
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("train", help="train one regime")
    t.add_argument("--regime", required=True, choices=[k.value for k in RegimeKind])
    t.add_argument("--group", type=str.lower, choices=("lc", "pc"))
    t.add_argument("--task", choices=[x.value for x in ALL_TASKS])
    t.add_argument("--dataset", required=True, help="directory written by 'dataset split'")
    t.add_argument("--config")
    t.add_argument("--init", help="start from this checkpoint instead of a fresh base")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("assemble", help="combine heterogeneous Lc with homogeneous Pc")
    a.add_argument("--hetero", required=True)
    a.add_argument("--homo-pc", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_assemble)

    i = sub.add_parser("infer", help="gated two-stage inference")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--dataset", required=True)
    i.add_argument("--split", default="test", choices=("train", "val", "test"))
    i.add_argument("--tasks", default="a,b,c,d,e,f")
    i.add_argument("--max-new-tokens", type=int, default=40)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions")
    e.add_argument("--predictions", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--delta", type=float)
    e.add_argument("--ap-thresholds", type=_floats, default=(0.3, 0.5, 0.7))
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("run", help="end-to-end experiment")
    r.add_argument("--config")
    r.add_argument("--stages", help=f"comma list from {','.join(ex.STAGES)}")
    r.add_argument("--force", action="store_true")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--out", help=f"run directory (default under ${ex.OUTPUT_ROOT_ENV})")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="print the comparison table of a run")
    rep.add_argument("run_dir")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args))
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
