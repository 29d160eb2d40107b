"""Supervised instruction fine-tuning of the group projectors and adapters.

Three multitask regimes are supported: independent (one task), homogeneous
(one task group) and heterogeneous (all six tasks, updating only the
linguistic-centric parameter block, so the perception-centric tasks act as
auxiliary objectives).
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch

from .datasetkit import Corpus, build_qa_pairs, crop_start
from .model import (
    CrashChatModel,
    Example,
    checkpoint_bytes,
    checkpoint_payload,
    model_from_payload,
    rename_block,
)
from .schema import ALL_TASKS, PC_TASKS, QAPair, TaskGroup, TaskId, group_of, tasks_in

log = logging.getLogger(__name__)


class RegimeKind(str, enum.Enum):
    INDEPENDENT = "independent"
    HOMOGENEOUS = "homogeneous"
    HETEROGENEOUS = "heterogeneous"


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass(frozen=True)
class Regime:
    kind: RegimeKind
    tasks: tuple[TaskId, ...]
    group: TaskGroup

    def __post_init__(self) -> None:
        kind = RegimeKind(self.kind)
        tasks = tuple(TaskId(t) for t in self.tasks)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "tasks", tasks)
        object.__setattr__(self, "group", TaskGroup(self.group))
        if kind is RegimeKind.INDEPENDENT:
            ok = len(tasks) == 1 and self.group is group_of(tasks[0])
        elif kind is RegimeKind.HOMOGENEOUS:
            ok = set(tasks) == set(tasks_in(self.group)) and len(tasks) == len(tasks_in(self.group))
        else:
            ok = set(tasks) == set(ALL_TASKS) and self.group is TaskGroup.LC
        if not ok:
            raise ValueError(f"invalid {kind.value} regime: tasks={[t.value for t in tasks]} group={self.group}")

    @classmethod
    def independent(cls, task: TaskId | str) -> "Regime":
        task = TaskId.parse(task)
        return cls(RegimeKind.INDEPENDENT, (task,), group_of(task))

    @classmethod
    def homogeneous(cls, group: TaskGroup | str) -> "Regime":
        group = _parse_group(group)
        return cls(RegimeKind.HOMOGENEOUS, tasks_in(group), group)

    @classmethod
    def heterogeneous(cls) -> "Regime":
        return cls(RegimeKind.HETEROGENEOUS, ALL_TASKS, TaskGroup.LC)

    @property
    def name(self) -> str:
        if self.kind is RegimeKind.INDEPENDENT:
            return f"independent-{self.tasks[0].value}"
        if self.kind is RegimeKind.HOMOGENEOUS:
            return f"homogeneous-{self.group.value.lower()}"
        return "heterogeneous"

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "tasks": [t.value for t in self.tasks], "group": self.group.value}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Regime":
        return cls(RegimeKind(d["kind"]), tuple(TaskId(t) for t in d["tasks"]), TaskGroup(d["group"]))


def _parse_group(group: TaskGroup | str) -> TaskGroup:
    if isinstance(group, TaskGroup):
        return group
    for g in TaskGroup:
        if g.value.lower() == str(group).lower():
            return g
    raise ValueError(f"unknown task group {group!r}")


@dataclass(frozen=True)
class TrainConfig:
    regime: Regime
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 3e-3
    seed: int = 0
    task_weights: dict[TaskId, float] = field(default_factory=dict)
    answer_only: bool = True
    max_grad_norm: float = 1.0
    # fresh start-cropped copies of each positive per epoch, for the localization tasks
    time_shift_copies: int = 4
    time_shift_grid: float = 0.5
    # crops keep at least this much video before the pre-crash onset
    time_shift_margin: float = 1.0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if self.time_shift_copies < 0 or not self.time_shift_grid > 0 or self.time_shift_margin < 0:
            raise ValueError("time-shift settings must be non-negative with a positive grid")
        weights = {TaskId.parse(k): float(v) for k, v in self.task_weights.items()}
        if any(not w > 0 for w in weights.values()):
            raise ValueError("task weights must be positive")
        object.__setattr__(self, "task_weights", weights)

    def weight(self, task: TaskId) -> float:
        return self.task_weights.get(task, 1.0)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


@dataclass
class TrainItem:
    task: TaskId
    example: Example


def build_items(model: CrashChatModel, corpus: Corpus, tasks: Iterable[TaskId] | None = None,
                pairs: Sequence[QAPair] | None = None) -> list[TrainItem]:
    """Tokenize QA pairs and attach cached video tokens."""
    wanted = set(tasks) if tasks is not None else set(ALL_TASKS)
    by_id = corpus.by_id()
    pairs = pairs if pairs is not None else build_qa_pairs(corpus.samples, corpus.texts)
    cache: dict[str, torch.Tensor] = {}
    items = []
    for qa in pairs:
        if qa.task not in wanted:
            continue
        if qa.video_id not in cache:
            cache[qa.video_id] = model.encode_video(by_id[qa.video_id])
        items.append(TrainItem(qa.task, model.make_example(cache[qa.video_id], qa.question, qa.reference_answer)))
    return items


def shifted_items(model: CrashChatModel, corpus: Corpus, tasks: Iterable[TaskId], copies: int,
                  rng: np.random.Generator, grid: float = 0.5, margin: float = 1.0) -> list[TrainItem]:
    """Localization items on randomly start-cropped positives.

    Each positive yields up to ``copies`` crops of a whole number of ``grid``
    steps; draws of zero are skipped, so the count varies.
    """
    wanted = [t for t in tasks if t in PC_TASKS]
    if not wanted or copies == 0:
        return []
    samples, texts = [], {}
    for s in corpus.samples:
        if not s.label:
            continue
        room = int(math.floor((s.annotation.pre_crash_start - margin) / grid + 1e-9))
        if room < 1:
            continue
        for j in sorted(set(rng.integers(0, room + 1, size=copies).tolist()) - {0}):
            c = crop_start(s, j * grid)
            samples.append(c)
            texts[c.video_id] = corpus.texts.get(s.video_id)
    return build_items(model, Corpus(samples, texts), wanted)


# --------------------------------------------------------------------------
# one step
# --------------------------------------------------------------------------


def sft_loss(model: CrashChatModel, batch: Sequence[TrainItem], group: TaskGroup,
             answer_only: bool = True) -> torch.Tensor:
    """Mean next-token NLL over the reference-answer tokens of the batch.

    With ``answer_only=False`` the prompt text tokens are scored too (video
    tokens never are).
    """
    examples = [it.example for it in batch]
    if not answer_only:
        # fold the prompt (minus the leading <bos>) into the scored tokens
        examples = [Example(e.video, e.prompt[:1], e.prompt[1:] + e.answer) for e in examples]
    stats = model.answer_nll(examples, group)
    total = stats[:, 1].sum()
    if total == 0:
        raise TrainingError("batch has no answer tokens")
    return stats[:, 0].sum() / total


def sft_step(model: CrashChatModel, optimizer: torch.optim.Optimizer, batch: Sequence[TrainItem],
             regime: Regime, answer_only: bool = True, max_grad_norm: float | None = 1.0) -> float:
    """One optimizer step on the regime's parameter block; returns the loss."""
    bad = sorted({it.task.value for it in batch if it.task not in regime.tasks})
    if bad:
        raise ValueError(f"tasks {bad} are not part of regime {regime.name}")
    optimizer.zero_grad(set_to_none=True)
    loss = sft_loss(model, batch, regime.group, answer_only)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss.item()} in regime {regime.name}")
    loss.backward()
    params = model.trainable_parameters(regime.group)
    if max_grad_norm:
        torch.nn.utils.clip_grad_norm_(params, max_grad_norm)
    optimizer.step()
    return float(loss.item())


@torch.no_grad()
def mean_loss(model: CrashChatModel, items: Sequence[TrainItem], group: TaskGroup,
              batch_size: int = 64) -> float:
    if not items:
        return float("nan")
    nll = count = 0.0
    for i in range(0, len(items), batch_size):
        stats = model.answer_nll([it.example for it in items[i:i + batch_size]], group)
        nll += float(stats[:, 0].sum())
        count += float(stats[:, 1].sum())
    return nll / count


# --------------------------------------------------------------------------
# a full regime
# --------------------------------------------------------------------------


@dataclass
class LogRow:
    epoch: int
    task: str
    split: str
    loss: float


@dataclass
class TrainResult:
    regime: Regime
    model: CrashChatModel
    best_epoch: int
    best_val_loss: float
    log: list[LogRow]

    def payload(self) -> dict[str, Any]:
        return checkpoint_payload(self.model, self.meta())

    def meta(self) -> dict[str, Any]:
        return {"regime": self.regime.to_dict(), "bestEpoch": self.best_epoch,
                "bestValLoss": round(self.best_val_loss, 6)}

    def checkpoint_bytes(self) -> bytes:
        return checkpoint_bytes(self.model, self.meta())

    def write_log(self, path: str | Path) -> None:
        write_log(self.log, path)


def write_log(rows: Sequence[LogRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "task", "split", "loss"])
        for r in rows:
            w.writerow([r.epoch, r.task, r.split, f"{r.loss:.6f}"])


class _TaskSampler:
    """Draws tasks in proportion to their weights, cycling through each task's items."""

    def __init__(self, items: dict[TaskId, list[TrainItem]], weights: dict[TaskId, float], seed: int):
        self.items = items
        self.tasks = sorted(items, key=lambda t: t.value)
        w = np.array([weights[t] for t in self.tasks], dtype=float)
        self.p = w / w.sum()
        self.rng = np.random.default_rng([seed, 7])
        self.queues: dict[TaskId, list[int]] = {t: [] for t in self.tasks}

    def set_items(self, task: TaskId, items: list[TrainItem]) -> None:
        self.items[task] = items
        self.queues[task] = []

    def __len__(self) -> int:
        return sum(len(v) for v in self.items.values())

    def draw(self, n: int) -> list[TrainItem]:
        picks = self.rng.choice(len(self.tasks), size=n, p=self.p)
        out = []
        for k in picks:
            t = self.tasks[k]
            q = self.queues[t]
            if not q:
                q.extend(self.rng.permutation(len(self.items[t])).tolist())
            out.append(self.items[t][q.pop()])
        return out


def train_regime(cfg: TrainConfig, init: dict[str, Any], train: Corpus, val: Corpus,
                 log_every: int = 0) -> TrainResult:
    """Fine-tune one regime starting from checkpoint payload ``init``.

    The model with the lowest mean validation loss over the regime's tasks
    is kept.
    """
    regime = cfg.regime
    torch.manual_seed(cfg.seed)
    model = model_from_payload(init)
    tasks = regime.tasks
    train_items = build_items(model, train, tasks)
    val_items = build_items(model, val, tasks)
    by_task_train: dict[TaskId, list[TrainItem]] = defaultdict(list)
    by_task_val: dict[TaskId, list[TrainItem]] = defaultdict(list)
    for it in train_items:
        by_task_train[it.task].append(it)
    for it in val_items:
        by_task_val[it.task].append(it)
    empty = [t.value for t in tasks if not by_task_train.get(t)]
    if empty:
        raise TrainingError(f"no training data for tasks {empty} in regime {regime.name}")

    params = model.trainable_parameters(regime.group)
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    sampler = _TaskSampler(dict(by_task_train), {t: cfg.weight(t) for t in tasks}, cfg.seed)
    aug_rng = np.random.default_rng([cfg.seed, 11])

    rows: list[LogRow] = []
    best = (math.inf, 0, model.group_state(regime.group))

    def record(epoch: int) -> float:
        per_task = []
        for t in tasks:
            for split, pool in (("train", by_task_train), ("val", by_task_val)):
                if pool.get(t):
                    rows.append(LogRow(epoch, t.value, split, mean_loss(model, pool[t], regime.group)))
                    if split == "val":
                        per_task.append(rows[-1].loss)
        return float(np.mean(per_task)) if per_task else math.inf

    record(0)
    for epoch in range(1, cfg.epochs + 1):
        extra = shifted_items(model, train, tasks, cfg.time_shift_copies, aug_rng, cfg.time_shift_grid,
                              cfg.time_shift_margin)
        for t in {it.task for it in extra}:
            sampler.set_items(t, by_task_train[t] + [it for it in extra if it.task is t])
        steps = max(1, math.ceil(len(sampler) / cfg.batch_size))
        model.train()
        losses = [sft_step(model, optimizer, sampler.draw(cfg.batch_size), regime, cfg.answer_only,
                           cfg.max_grad_norm) for _ in range(steps)]
        model.eval()
        val_loss = record(epoch)
        if log_every and epoch % log_every == 0:
            log.info("%s epoch %d train %.4f val %.4f", regime.name, epoch, np.mean(losses), val_loss)
        if val_loss < best[0]:
            best = (val_loss, epoch, model.group_state(regime.group))
    model.load_group_state(regime.group, best[2])
    return TrainResult(regime, model, best[1], best[0], rows)


def train_independent_all(cfg: TrainConfig, init: dict[str, Any], train: Corpus, val: Corpus) -> dict[TaskId, TrainResult]:
    """The six monotask runs."""
    out = {}
    for task in ALL_TASKS:
        c = dataclasses.replace(cfg, regime=Regime.independent(task), task_weights={})
        out[task] = train_regime(c, init, train, val)
    return out


# --------------------------------------------------------------------------
# CrashChat assembly
# --------------------------------------------------------------------------


class AssemblyError(ValueError):
    pass


def assemble_crashchat(hetero: dict[str, Any], homo_pc: dict[str, Any]) -> dict[str, Any]:
    """Combine the heterogeneous Lc block with the homogeneous Pc block.

    Both arguments are checkpoint payloads; the result is a payload whose
    frozen base is shared by both.
    """
    h_reg = hetero.get("meta", {}).get("regime", {})
    p_reg = homo_pc.get("meta", {}).get("regime", {})
    if h_reg.get("kind") != RegimeKind.HETEROGENEOUS.value:
        raise AssemblyError(f"first checkpoint must be heterogeneous, got {h_reg.get('kind')}")
    if p_reg.get("kind") != RegimeKind.HOMOGENEOUS.value or p_reg.get("group") != TaskGroup.PC.value:
        raise AssemblyError(f"second checkpoint must be homogeneous Pc, got {p_reg}")
    if hetero["config"] != homo_pc["config"] or hetero["vocab"] != homo_pc["vocab"]:
        raise AssemblyError("checkpoints were built on different base configurations")
    for key, val in hetero["base"].items():
        if not torch.equal(val, homo_pc["base"][key]):
            raise AssemblyError(f"frozen base weight {key} differs between checkpoints")
    return {
        "config": hetero["config"],
        "vocab": hetero["vocab"],
        "base": hetero["base"],
        "groups": {TaskGroup.LC.value: hetero["groups"][TaskGroup.LC.value],
                   TaskGroup.PC.value: homo_pc["groups"][TaskGroup.PC.value]},
        "meta": {"regime": {"kind": "crashchat"}, "lc": h_reg, "pc": p_reg},
    }


def payload_with_blocks(lc: dict[str, Any], pc: dict[str, Any], pc_from: TaskGroup = TaskGroup.PC,
                        name: str = "composite") -> dict[str, Any]:
    """A payload taking its Lc block from ``lc`` and its Pc slot from ``pc``.

    ``pc_from=TaskGroup.LC`` fills the Pc slot with ``pc``'s Lc block, which
    is how a single heterogeneous model answers localization queries.
    """
    pc_state = pc["groups"][TaskGroup(pc_from).value]
    if pc_from is TaskGroup.LC:
        pc_state = {rename_block(k, TaskGroup.LC.value, TaskGroup.PC.value): v for k, v in pc_state.items()}
    return {
        "config": lc["config"],
        "vocab": lc["vocab"],
        "base": lc["base"],
        "groups": {TaskGroup.LC.value: lc["groups"][TaskGroup.LC.value], TaskGroup.PC.value: pc_state},
        "meta": {"regime": {"kind": name}},
    }
