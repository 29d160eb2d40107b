"""Evaluation metrics for the six crash-video tasks.

Recognition uses class-level recall/precision/F1; understanding tasks use
smoothed sentence BLEU-4, ROUGE-L and an optional embedding similarity;
localization uses interval IoU (crash) or the tolerance-extended pre-crash
IoU, summarized as mIoU and AP at IoU thresholds.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .model import split_words
from .schema import (
    ALL_TASKS,
    PC_TASKS,
    TEXT_TASKS,
    PredictionRecord,
    TaskId,
    TemporalAnnotation,
    VideoSample,
)

DEFAULT_THRESHOLDS = (0.30, 0.50, 0.70)
BLEU_EPSILON = 0.1


class EvaluationError(ValueError):
    pass


# --------------------------------------------------------------------------
# recognition
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassScores:
    recall: float
    precision: float
    f1: float
    support: int
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class ClassificationReport:
    positive: ClassScores
    negative: ClassScores
    flags: tuple[str, ...] = ()


def _safe_div(num: float, den: float, flag: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def _class_scores(tp: int, fp: int, fn: int) -> ClassScores:
    flags: list[str] = []
    rec = _safe_div(tp, tp + fn, "recall_zero_division", flags)
    pre = _safe_div(tp, tp + fp, "precision_zero_division", flags)
    f1 = _safe_div(2 * pre * rec, pre + rec, "f1_zero_division", flags)
    return ClassScores(rec, pre, f1, tp + fn, tuple(flags))


def confusion_scores(tp: int, fp: int, fn: int, tn: int) -> ClassificationReport:
    return ClassificationReport(_class_scores(tp, fp, fn), _class_scores(tn, fn, fp))


def classification_metrics(preds: Iterable[PredictionRecord], labels: Mapping[str, bool]) -> ClassificationReport:
    """Per-class recall/precision/F1 for crash recognition.

    A labeled video without a usable prediction counts as predicted negative.
    """
    verdict: dict[str, bool] = {}
    flags: list[str] = []
    for p in preds:
        if p.task is not TaskId.RECOGNITION:
            continue
        verdict[p.video_id] = bool(p.parsed) if not p.failed else False
        if p.failed:
            flags.append(f"unparsed:{p.video_id}")
    tp = fp = fn = tn = 0
    for vid in sorted(labels):
        if vid not in verdict:
            flags.append(f"missing:{vid}")
        pred, truth = verdict.get(vid, False), bool(labels[vid])
        tp += pred and truth
        fp += pred and not truth
        fn += truth and not pred
        tn += not pred and not truth
    rep = confusion_scores(tp, fp, fn, tn)
    return ClassificationReport(rep.positive, rep.negative, tuple(flags))


# --------------------------------------------------------------------------
# temporal grounding
# --------------------------------------------------------------------------


def interval_iou(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Temporal IoU of two ``[start, end]`` intervals."""
    p0, p1 = float(pred[0]), float(pred[1])
    t0, t1 = float(truth[0]), float(truth[1])
    if t0 == t1 or p0 == p1:
        return 1.0 if (p0, p1) == (t0, t1) else 0.0
    inter = min(p1, t1) - max(p0, t0)
    if inter <= 0:
        return 0.0
    union = max(p1, t1) - min(p0, t0)
    return inter / union


def precrash_iou(t_hat: float, ann: TemporalAnnotation, delta: float | None = None) -> float:
    """Score a predicted pre-crash onset against an annotation.

    1 inside ``[t_ar - delta, t_ar]``, a linear ramp down to 0 across the
    pre-crash phase ``(t_ar, t_ai)``, and 0 before ``t_ar - delta`` or from
    crash onset on.
    """
    t_ar, t_ai = ann.pre_crash_start, ann.crash_start
    d = ann.tolerance if delta is None else float(delta)
    t = float(t_hat)
    if t_ar - d <= t <= t_ar:
        return 1.0
    if t_ar < t < t_ai:
        return (t - t_ai) / (t_ar - t_ai)
    return 0.0


def average_precision_at(ious: Iterable[float], tau: float) -> float:
    """Fraction of videos whose IoU reaches ``tau``."""
    vals = list(ious)
    if not vals:
        raise EvaluationError("AP over an empty set of videos")
    return sum(1 for v in vals if v >= tau) / len(vals)


def ap_name(tau: float) -> str:
    return f"AP@{int(round(tau * 100))}"


@dataclass(frozen=True)
class TemporalScore:
    per_video: dict[str, float]
    miou: float
    ap: dict[float, float]


def temporal_score(per_video: Mapping[str, float], thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> TemporalScore:
    if not per_video:
        raise EvaluationError("no videos to score")
    ordered = dict(sorted(per_video.items()))
    vals = list(ordered.values())
    return TemporalScore(ordered, math.fsum(vals) / len(vals),
                         {t: average_precision_at(vals, t) for t in sorted(thresholds)})


# --------------------------------------------------------------------------
# text similarity
# --------------------------------------------------------------------------


def tokenize(text: str) -> list[str]:
    return split_words(text)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: str | Sequence[str], reference: str | Sequence[str], max_n: int = 4,
         epsilon: float = BLEU_EPSILON) -> float:
    """Sentence BLEU-4 with uniform weights and brevity penalty.

    A zero clipped count for an order n >= 2 is replaced by ``epsilon``; with
    no unigram overlap the score is 0.
    """
    cand = tokenize(candidate) if isinstance(candidate, str) else list(candidate)
    ref = tokenize(reference) if isinstance(reference, str) else list(reference)
    if not cand or not ref:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        c_counts, r_counts = _ngrams(cand, n), _ngrams(ref, n)
        total = max(sum(c_counts.values()), 1)
        match = sum(min(c, r_counts[g]) for g, c in c_counts.items())
        if match == 0:
            if n == 1:
                return 0.0
            match = epsilon
        log_p += math.log(match / total) / max_n
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return min(1.0, bp * math.exp(log_p))


def lcs_length(a: Sequence[Any], b: Sequence[Any]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str | Sequence[str], reference: str | Sequence[str]) -> float:
    """ROUGE-L F1 (beta = 1) from the longest common subsequence."""
    cand = tokenize(candidate) if isinstance(candidate, str) else list(candidate)
    ref = tokenize(reference) if isinstance(reference, str) else list(reference)
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


# Maps a list of sentences to a (n, dim) array of embeddings.
EmbeddingProvider = Callable[[Sequence[str]], np.ndarray]


def embedding_score(candidate: str, reference: str, provider: EmbeddingProvider) -> float:
    """Cosine similarity of sentence embeddings, clipped to [0, 1]."""
    emb = np.asarray(provider([candidate, reference]), dtype=float)
    a, b = emb[0], emb[1]
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), 0.0, 1.0))


@dataclass(frozen=True)
class TextScore:
    bleu: float
    rouge_l: float
    bert: float | None = None


# --------------------------------------------------------------------------
# a full run
# --------------------------------------------------------------------------

METRIC_NAMES = {
    TaskId.RECOGNITION: ("Rec", "Pre", "F1"),
    TaskId.DESCRIPTION: ("BLEU", "ROUGE", "BERT"),
    TaskId.CAUSAL_REASONING: ("BLEU", "ROUGE", "BERT"),
    TaskId.PREVENTION_REASONING: ("BLEU", "ROUGE", "BERT"),
    TaskId.CRASH_LOCALIZATION: ("mIoU", "AP@30", "AP@50", "AP@70"),
    TaskId.PRECRASH_LOCALIZATION: ("mIoU", "AP@30", "AP@50", "AP@70"),
}


@dataclass(frozen=True)
class EvalConfig:
    delta: float | None = None
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    embedder: EmbeddingProvider | None = None


@dataclass
class TaskReport:
    task: TaskId
    evaluated: bool
    metrics: dict[str, float] = field(default_factory=dict)
    count: int = 0
    flags: list[str] = field(default_factory=list)
    per_video: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "task": self.task.value,
            "title": self.task.title,
            "status": "evaluated" if self.evaluated else "not evaluated",
        }
        if self.evaluated:
            out["metrics"] = self.metrics
            out["count"] = self.count
            out["flags"] = self.flags
            if self.per_video:
                out["perVideo"] = self.per_video
        return out


@dataclass
class MetricsReport:
    tasks: dict[TaskId, TaskReport]

    def to_json(self) -> dict[str, Any]:
        return {"tasks": {t.value: self.tasks[t].to_json() for t in ALL_TASKS if t in self.tasks}}

    def metric_names(self) -> set[str]:
        return {k for r in self.tasks.values() for k in r.metrics}

    def value(self, task: TaskId, name: str) -> float | None:
        r = self.tasks.get(task)
        return None if r is None else r.metrics.get(name)

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "MetricsReport":
        tasks = {}
        for key, r in obj["tasks"].items():
            t = TaskId(key)
            tasks[t] = TaskReport(t, r["status"] == "evaluated", dict(r.get("metrics", {})), r.get("count", 0),
                                  list(r.get("flags", [])), dict(r.get("perVideo", {})))
        return cls(tasks)


def _index(preds: Iterable[PredictionRecord]) -> dict[tuple[str, TaskId], PredictionRecord]:
    out: dict[tuple[str, TaskId], PredictionRecord] = {}
    for p in preds:
        key = (p.video_id, p.task)
        if key in out:
            raise EvaluationError(f"duplicate prediction for video {p.video_id} task {p.task.value}")
        out[key] = p
    return out


def evaluate_run(
    predictions: Iterable[PredictionRecord],
    samples: Sequence[VideoSample],
    references: Mapping[tuple[str, TaskId], str],
    config: EvalConfig = EvalConfig(),
) -> MetricsReport:
    """Aggregate every task's metrics over the evaluated split.

    ``references`` maps ``(videoId, task)`` to the reference answer text for
    the understanding tasks. Localization is scored over all positive
    videos; missing or unparsable answers score IoU 0.
    """
    index = _index(predictions)
    present = {t for _, t in index}
    samples = sorted(samples, key=lambda s: s.video_id)
    reports: dict[TaskId, TaskReport] = {}

    for task in ALL_TASKS:
        if task not in present:
            reports[task] = TaskReport(task, False)
            continue
        rep = TaskReport(task, True)
        if task is TaskId.RECOGNITION:
            cls = classification_metrics((p for (v, t), p in index.items() if t is task),
                                         {s.video_id: s.label for s in samples})
            rep.metrics = {"Rec": cls.positive.recall, "Pre": cls.positive.precision, "F1": cls.positive.f1}
            rep.count = len(samples)
            rep.flags = list(cls.flags) + list(cls.positive.flags)
        elif task in TEXT_TASKS:
            b, r, e = [], [], []
            for s in samples:
                ref = references.get((s.video_id, task))
                if ref is None:
                    continue
                p = index.get((s.video_id, task))
                cand = p.raw_text if p is not None else ""
                if p is None:
                    rep.flags.append(f"missing:{s.video_id}")
                b.append(bleu(cand, ref))
                r.append(rouge_l(cand, ref))
                if config.embedder is not None:
                    e.append(embedding_score(cand, ref, config.embedder))
            if not b:
                reports[task] = TaskReport(task, False)
                continue
            rep.metrics = {"BLEU": math.fsum(b) / len(b), "ROUGE": math.fsum(r) / len(r)}
            if e:
                rep.metrics["BERT"] = math.fsum(e) / len(e)
            rep.count = len(b)
        else:
            per_video: dict[str, float] = {}
            for s in samples:
                if not s.label:
                    continue
                ann = s.annotation
                p = index.get((s.video_id, task))
                if p is None:
                    rep.flags.append(f"missing:{s.video_id}")
                    per_video[s.video_id] = 0.0
                elif p.failed:
                    per_video[s.video_id] = 0.0
                elif task is TaskId.CRASH_LOCALIZATION:
                    per_video[s.video_id] = interval_iou(p.parsed, (ann.crash_start, ann.crash_end))
                else:
                    per_video[s.video_id] = precrash_iou(p.parsed, ann, config.delta)
            if not per_video:
                reports[task] = TaskReport(task, False)
                continue
            ts = temporal_score(per_video, config.thresholds)
            rep.metrics = {"mIoU": ts.miou, **{ap_name(t): v for t, v in ts.ap.items()}}
            rep.count = len(per_video)
            rep.per_video = ts.per_video
        reports[task] = rep
    return MetricsReport(reports)


# --------------------------------------------------------------------------
# tables
# --------------------------------------------------------------------------


def format_table(columns: Mapping[str, MetricsReport], deltas: Sequence[tuple[str, str]] = (),
                 digits: int = 4) -> str:
    """Aligned text table: one block per task, one column per model, then difference columns."""
    names = list(columns)
    heads = [""] + names + [f"{a}-{b}" for a, b in deltas]
    rows: list[list[str]] = []
    for task in ALL_TASKS:
        metrics: list[str] = []
        for rep in columns.values():
            for m in rep.tasks.get(task, TaskReport(task, False)).metrics:
                if m not in metrics:
                    metrics.append(m)
        if not metrics:
            continue
        rows.append([task.title])
        for m in metrics:
            row = [m]
            for n in names:
                v = columns[n].value(task, m)
                row.append("-" if v is None else f"{v:.{digits}f}")
            for a, b in deltas:
                va, vb = columns[a].value(task, m), columns[b].value(task, m)
                if va is None or vb is None:
                    row.append("-")
                else:
                    d = va - vb
                    arrow = "+" if d > 0 else "-" if d < 0 else " "
                    row.append(f"{arrow}{abs(d):.{digits - 1}f}")
            rows.append(row)
    width = [max(len(heads[i]), *(len(r[i]) for r in rows if len(r) > i)) for i in range(len(heads))]
    lines = ["  ".join(h.ljust(width[0]) if i == 0 else h.rjust(width[i]) for i, h in enumerate(heads))]
    lines.append("-" * len(lines[0]))
    for r in rows:
        if len(r) == 1:
            lines.append(r[0])
            continue
        lines.append("  ".join(c.ljust(width[0]) if i == 0 else c.rjust(width[i]) for i, c in enumerate(r)))
    return "\n".join(lines) + "\n"
