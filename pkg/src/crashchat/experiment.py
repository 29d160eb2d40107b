"""End-to-end experiment runner: dataset -> train -> assemble -> infer -> eval -> report.

A run directory holds the resolved config, every stage's artifacts and a
``status.json`` recording completed stages. Stages already completed under
the same config hash are skipped unless forced.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import torch

from .datasetkit import (
    Corpus,
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
from .metrics import DEFAULT_THRESHOLDS, EvalConfig, MetricsReport, evaluate_run, format_table
from .model import build_model, checkpoint_payload, model_from_payload, read_checkpoint
from .pipeline import CrashChat, predict
from .schema import ALL_TASKS, LC_TASKS, PredictionRecord, TaskGroup, TaskId, dumps, read_jsonl, write_jsonl
from .training import (
    Regime,
    RegimeKind,
    TrainConfig,
    assemble_crashchat,
    payload_with_blocks,
    train_regime,
)

log = logging.getLogger(__name__)

STAGES = ("dataset", "train", "assemble", "infer", "eval", "report")
OUTPUT_ROOT_ENV = "CRASHCHAT_OUTPUT_ROOT"
SYSTEMS = ("Ind.", "Homo.", "Hete.", "CrashChat")
DELTAS = (("Homo.", "Ind."), ("Hete.", "Ind."), ("Hete.", "Homo."))


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RegimeParams:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 3e-3
    task_weights: dict[str, float] = field(default_factory=dict)
    answer_only: bool = True
    time_shift_copies: int = 4

    def train_config(self, regime: Regime, seed: int) -> TrainConfig:
        return TrainConfig(regime, self.epochs, self.batch_size, self.learning_rate, seed,
                           dict(self.task_weights), self.answer_only,
                           time_shift_copies=self.time_shift_copies)


@dataclass(frozen=True)
class TrainSection:
    regimes: tuple[str, ...] = ("independent", "homogeneous", "heterogeneous")
    independent: RegimeParams = field(default_factory=RegimeParams)
    # the localization head keeps improving past 30 epochs under augmentation
    homogeneous: RegimeParams = field(default_factory=lambda: RegimeParams(epochs=60))
    heterogeneous: RegimeParams = field(default_factory=RegimeParams)

    def params(self, kind: RegimeKind) -> RegimeParams:
        return getattr(self, kind.value)


@dataclass(frozen=True)
class DatasetSection:
    synthetic: SyntheticConfig | None = field(default_factory=SyntheticConfig)
    manifest: str | None = None
    split: SplitSpec = field(default_factory=SplitSpec)


@dataclass(frozen=True)
class EvalSection:
    delta: float | None = None
    ap_thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    max_new_tokens: int = 40


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: dict[str, Any] = field(default_factory=dict)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output_dir: str | None = None
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir", None)
        return hashlib.sha256(dumps(d).encode()).hexdigest()[:16]

    def backbone(self, raw_dim: int) -> dict[str, Any]:
        d = {"seed": self.seed, "raw_dim": raw_dim}
        d.update(self.model)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        d = dict(d or {})
        ds = dict(d.get("dataset") or {})
        syn = ds.get("synthetic", {}) if "synthetic" in ds or "manifest" not in ds else None
        dataset = DatasetSection(
            synthetic=SyntheticConfig.from_dict(syn) if syn is not None else None,
            manifest=ds.get("manifest"),
            split=SplitSpec(tuple(ds.get("split", {}).get("ratios", (0.8, 0.1, 0.1))),
                            int(ds.get("split", {}).get("seed", d.get("seed", 0)))),
        )
        tr = dict(d.get("train") or {})
        train = TrainSection(
            regimes=tuple(tr.get("regimes", TrainSection.regimes)),
            **{k.value: RegimeParams(**tr[k.value]) for k in RegimeKind if k.value in tr},
        )
        ev = dict(d.get("eval") or {})
        if "ap_thresholds" in ev:
            ev["ap_thresholds"] = tuple(float(x) for x in ev["ap_thresholds"])
        cfg = cls(dataset, dict(d.get("model") or {}), train, EvalSection(**ev), d.get("output_dir"),
                  int(d.get("seed", 0)))
        unknown = set(cfg.train.regimes) - {k.value for k in RegimeKind}
        if unknown:
            raise ValueError(f"unknown regimes {sorted(unknown)}")
        return cfg


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k.value if hasattr(k, "value") else k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    return ExperimentConfig.from_dict(data or {})


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# --------------------------------------------------------------------------
# systems under comparison
# --------------------------------------------------------------------------


def _system_payloads(ckpts: dict[str, dict[str, Any]], regimes: Sequence[str]) -> dict[str, dict[TaskId, dict[str, Any]]]:
    """For each compared system, the payload that answers each task."""
    out: dict[str, dict[TaskId, dict[str, Any]]] = {}
    if "independent" in regimes:
        gate = ckpts["independent-a"]
        per_task = {}
        for t in ALL_TASKS:
            own = ckpts[f"independent-{t.value}"]
            if t in LC_TASKS:
                per_task[t] = payload_with_blocks(own, own, TaskGroup.PC, "Ind.")
            else:
                per_task[t] = payload_with_blocks(gate, own, TaskGroup.PC, "Ind.")
        out["Ind."] = per_task
    if "homogeneous" in regimes:
        p = payload_with_blocks(ckpts["homogeneous-lc"], ckpts["homogeneous-pc"], TaskGroup.PC, "Homo.")
        out["Homo."] = {t: p for t in ALL_TASKS}
    if "heterogeneous" in regimes:
        h = ckpts["heterogeneous"]
        p = payload_with_blocks(h, h, TaskGroup.LC, "Hete.")
        out["Hete."] = {t: p for t in ALL_TASKS}
    if "crashchat" in ckpts:
        out["CrashChat"] = {t: ckpts["crashchat"] for t in ALL_TASKS}
    return out


def predict_with(payloads: dict[TaskId, dict[str, Any]], corpus: Corpus, tasks: Sequence[TaskId],
                 max_new_tokens: int) -> tuple[list[PredictionRecord], dict[str, int]]:
    """Predictions for ``tasks`` where each task may use its own payload."""
    by_payload: dict[int, tuple[dict[str, Any], list[TaskId]]] = {}
    for t in tasks:
        p = payloads[t]
        by_payload.setdefault(id(p), (p, []))[1].append(t)
    preds: list[PredictionRecord] = []
    counts = {g.value: 0 for g in TaskGroup}
    for payload, ts in by_payload.values():
        chat = CrashChat(model_from_payload(payload), max_new_tokens=max_new_tokens)
        preds += predict(chat, corpus.samples, ts)
        for g, n in chat.invocations.items():
            counts[g] += n
    preds.sort(key=lambda p: (p.video_id, p.task.value))
    return preds, counts


# --------------------------------------------------------------------------
# runner
# --------------------------------------------------------------------------


@dataclass
class RunResult:
    run_dir: Path
    completed: list[str]
    failed_stage: str | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.failed_stage is None


class Run:
    def __init__(self, cfg: ExperimentConfig, run_dir: Path):
        self.cfg = cfg
        self.dir = run_dir
        self.hash = cfg.config_hash()
        self.status_path = run_dir / "status.json"

    # paths
    @property
    def data_dir(self) -> Path:
        return self.dir / "dataset"

    @property
    def ckpt_dir(self) -> Path:
        return self.dir / "checkpoints"

    def status(self) -> dict[str, Any]:
        if self.status_path.exists():
            return json.loads(self.status_path.read_text())
        return {"configHash": self.hash, "completed": [], "failed": None, "timings": {}}

    def write_status(self, st: dict[str, Any]) -> None:
        self.status_path.write_text(json.dumps(st, indent=2, sort_keys=True) + "\n")

    def write_json(self, path: Path, obj: dict[str, Any]) -> None:
        obj = {"configHash": self.hash, **obj}
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    # stages
    def stage_dataset(self) -> None:
        ds = self.cfg.dataset
        if ds.manifest:
            corpus = ingest_manifest(ds.manifest)
            if corpus.errors:
                log.warning("%d manifest entries rejected", len(corpus.errors))
        else:
            corpus = generate_synthetic(ds.synthetic or SyntheticConfig())
        if self.data_dir.exists():
            shutil.rmtree(self.data_dir)
        save_corpus(corpus, self.data_dir, write_features=not ds.manifest or bool(corpus.feature_paths))
        write_jsonl(self.data_dir / "qa.jsonl", build_qa_pairs(corpus.samples, corpus.texts))
        save_split(stratified_split(corpus.samples, ds.split), corpus, self.data_dir)

    def splits(self) -> dict[str, Corpus]:
        raw_dim = self.cfg.dataset.synthetic.feature_dim if self.cfg.dataset.synthetic else 16
        return load_split(self.data_dir, raw_dim)

    def base_payload(self, raw_dim: int) -> dict[str, Any]:
        model = build_model(**self.cfg.backbone(raw_dim))
        return checkpoint_payload(model, {"regime": {"kind": "base"}, "configHash": self.hash})

    def stage_train(self) -> None:
        splits = self.splits()
        raw_dim = splits["train"].samples[0].feature_dim
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "logs").mkdir(exist_ok=True)
        base = self.base_payload(raw_dim)
        torch.save(base, self.ckpt_dir / "base.pt")
        for regime in self.regimes():
            params = self.cfg.train.params(regime.kind)
            res = train_regime(params.train_config(regime, self.cfg.seed), base, splits["train"], splits["val"])
            payload = res.payload()
            payload["meta"]["configHash"] = self.hash
            torch.save(payload, self.ckpt_dir / f"{regime.name}.pt")
            res.write_log(self.dir / "logs" / f"{regime.name}.csv")
            log.info("trained %s (best epoch %d, val %.4f)", regime.name, res.best_epoch, res.best_val_loss)

    def regimes(self) -> list[Regime]:
        out = []
        for kind in self.cfg.train.regimes:
            if kind == "independent":
                out += [Regime.independent(t) for t in ALL_TASKS]
            elif kind == "homogeneous":
                out += [Regime.homogeneous(TaskGroup.LC), Regime.homogeneous(TaskGroup.PC)]
            else:
                out.append(Regime.heterogeneous())
        return out

    def stage_assemble(self) -> None:
        if not {"homogeneous", "heterogeneous"} <= set(self.cfg.train.regimes):
            log.info("skipping CrashChat assembly: needs heterogeneous and homogeneous runs")
            return
        payload = assemble_crashchat(read_checkpoint(self.ckpt_dir / "heterogeneous.pt"),
                                     read_checkpoint(self.ckpt_dir / "homogeneous-pc.pt"))
        payload["meta"]["configHash"] = self.hash
        torch.save(payload, self.ckpt_dir / "crashchat.pt")

    def checkpoints(self) -> dict[str, dict[str, Any]]:
        return {p.stem: read_checkpoint(p) for p in sorted(self.ckpt_dir.glob("*.pt")) if p.stem != "base"}

    def stage_infer(self) -> None:
        test = self.splits()["test"]
        systems = _system_payloads(self.checkpoints(), self.cfg.train.regimes)
        pred_dir = self.dir / "predictions"
        pred_dir.mkdir(exist_ok=True)
        counters = {}
        for name, payloads in systems.items():
            preds, counts = predict_with(payloads, test, ALL_TASKS, self.cfg.eval.max_new_tokens)
            write_jsonl(pred_dir / f"{_slug(name)}.jsonl", preds)
            counters[name] = counts
        self.write_json(pred_dir / "invocations.json", {"invocations": counters})

    def stage_eval(self) -> None:
        test = self.splits()["test"]
        refs = {(q.video_id, q.task): q.reference_answer for q in build_qa_pairs(test.samples, test.texts)}
        ev = EvalConfig(self.cfg.eval.delta, self.cfg.eval.ap_thresholds)
        for path in sorted((self.dir / "predictions").glob("*.jsonl")):
            preds = [PredictionRecord.from_json(o) for o in read_jsonl(path)]
            report = evaluate_run(preds, test.samples, refs, ev)
            self.write_json(self.dir / "metrics" / f"{path.stem}.json", {"system": path.stem, **report.to_json()})

    def stage_report(self) -> None:
        reports = load_reports(self.dir / "metrics")
        table = comparison_table(reports)
        (self.dir / "comparison.txt").write_text(f"# config {self.hash}\n" + table)

    def write_outputs(self) -> None:
        """sha256 of every artifact, so results can be traced to inputs."""
        skip = {"status.json", "outputs.json"}
        files = {}
        for p in sorted(self.dir.rglob("*")):
            rel = p.relative_to(self.dir).as_posix()
            if p.is_file() and rel not in skip and not rel.startswith("dataset/features/"):
                files[rel] = hashlib.sha256(p.read_bytes()).hexdigest()
        self.write_json(self.dir / "outputs.json", {"files": files})


def _slug(name: str) -> str:
    return name.rstrip(".").lower()


def load_reports(metrics_dir: Path) -> dict[str, MetricsReport]:
    names = {_slug(s): s for s in SYSTEMS}
    out = {}
    for path in sorted(Path(metrics_dir).glob("*.json")):
        obj = json.loads(path.read_text())
        out[names.get(path.stem, path.stem)] = MetricsReport.from_json(obj)
    return {k: out[k] for k in sorted(out, key=lambda n: (SYSTEMS.index(n) if n in SYSTEMS else 99, n))}


def comparison_table(reports: dict[str, MetricsReport]) -> str:
    deltas = [d for d in DELTAS if d[0] in reports and d[1] in reports]
    return format_table(reports, deltas)


def run_experiment(cfg: ExperimentConfig | str | os.PathLike | None = None, run_dir: str | os.PathLike | None = None,
                   stages: Sequence[str] | None = None, force: bool = False) -> RunResult:
    """Execute the configured stages, skipping ones already completed."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg)
    wanted = list(stages) if stages else list(STAGES)
    bad = set(wanted) - set(STAGES)
    if bad:
        raise ValueError(f"unknown stages {sorted(bad)}; choose from {STAGES}")
    if run_dir is None:
        run_dir = Path(cfg.output_dir) if cfg.output_dir else default_output_root() / cfg.config_hash()
    run = Run(cfg, Path(run_dir))
    run.dir.mkdir(parents=True, exist_ok=True)
    st = run.status()
    if st.get("configHash") != run.hash:
        if not force:
            raise ValueError(f"{run.dir} holds a run for config {st.get('configHash')}; use force to overwrite")
        st = {"configHash": run.hash, "completed": [], "failed": None, "timings": {}}
    (run.dir / "config.json").write_text(json.dumps({"configHash": run.hash, **cfg.to_dict()}, indent=2,
                                                    sort_keys=True) + "\n")
    st["failed"] = None
    torch.set_num_threads(1)
    for stage in STAGES:
        if stage not in wanted:
            continue
        if stage in st["completed"] and not force:
            log.info("stage %s already complete, skipping", stage)
            continue
        t0 = time.perf_counter()
        log.info("stage %s", stage)
        try:
            getattr(run, f"stage_{stage}")()
        except Exception as exc:  # record and stop; earlier artifacts stay on disk
            log.exception("stage %s failed", stage)
            st["failed"] = {"stage": stage, "error": f"{type(exc).__name__}: {exc}"}
            run.write_status(st)
            return RunResult(run.dir, list(st["completed"]), stage, str(exc))
        if stage not in st["completed"]:
            st["completed"].append(stage)
        st["timings"][stage] = round(time.perf_counter() - t0, 2)
        run.write_status(st)
    run.write_outputs()
    return RunResult(run.dir, list(st["completed"]))
