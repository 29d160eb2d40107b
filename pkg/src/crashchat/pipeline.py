"""Gated two-stage inference and answer parsing.

Every query first goes through the linguistic-centric projector/adapter.
Localization queries then take a second pass through the
perception-centric pair, but only when stage 1 said the video shows a crash.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .datasetkit import QUESTIONS
from .model import CrashChatModel, Example
from .schema import (
    PC_TASKS,
    REFUSAL_TEXT,
    TEXT_TASKS,
    PredictionRecord,
    TaskGroup,
    TaskId,
    VideoSample,
)

_NUMBER = r"(\d+(?:\.\d+)?)"
_YES_NO = re.compile(r"\s*(yes|no)\b", re.IGNORECASE)
_INTERVAL = re.compile(rf"from\s+{_NUMBER}\s*s?\s+to\s+{_NUMBER}", re.IGNORECASE)
_POINT = re.compile(rf"at\s+{_NUMBER}", re.IGNORECASE)
_ANY_NUMBER = re.compile(_NUMBER)


def _clamp(t: float, duration: float, flags: list[str]) -> float:
    c = min(max(t, 0.0), duration)
    if c != t and "clamped" not in flags:
        flags.append("clamped")
    return c


def parse_answer(raw_text: str, task: TaskId, duration: float, video_id: str = "") -> PredictionRecord:
    """Read a structured answer out of generated text. Never raises on bad text.

    Timestamps are clamped to ``[0, duration]``; a reversed interval is
    swapped. Unreadable answers come back with ``parsed=None``.
    """
    task = TaskId(task)
    raw = raw_text or ""
    if task in TEXT_TASKS:
        return PredictionRecord(video_id, task, raw, raw)
    if task is TaskId.RECOGNITION:
        m = _YES_NO.match(raw)
        if m is None:
            return PredictionRecord(video_id, task, raw, None, ("parse_failure",))
        return PredictionRecord(video_id, task, raw, m.group(1).lower() == "yes")

    flags: list[str] = []
    if task is TaskId.CRASH_LOCALIZATION:
        m = _INTERVAL.search(raw)
        nums = [m.group(1), m.group(2)] if m else _ANY_NUMBER.findall(raw)[:2]
        if len(nums) < 2:
            return PredictionRecord(video_id, task, raw, None, ("parse_failure",))
        t1, t2 = (_clamp(float(x), duration, flags) for x in nums)
        if t1 > t2:
            t1, t2 = t2, t1
            flags.append("swapped")
        return PredictionRecord(video_id, task, raw, (t1, t2), tuple(flags))

    m = _POINT.search(raw)
    nums = [m.group(1)] if m else _ANY_NUMBER.findall(raw)[:1]
    if not nums:
        return PredictionRecord(video_id, task, raw, None, ("parse_failure",))
    return PredictionRecord(video_id, task, raw, _clamp(float(nums[0]), duration, flags), tuple(flags))


@dataclass(frozen=True)
class InferenceResult:
    """Both stages of one query.

    ``stage1_positive`` is the stage-1 crash verdict for recognition and
    localization queries, and None for the understanding tasks, where stage 1
    answers the question itself.
    """

    stage1_text: str
    stage1_positive: bool | None
    stage2_text: str | None
    final: PredictionRecord


class CrashChat:
    """Runs queries against a model holding both adapter sets.

    ``model.invocations`` counts sequences decoded per group, which is how
    the gating contract is audited.
    """

    def __init__(self, model: CrashChatModel, max_new_tokens: int = 40, batch_size: int = 64):
        self.model = model
        self.max_new_tokens = max_new_tokens
        self.batch_size = batch_size

    @property
    def invocations(self) -> dict[str, int]:
        return {g.value: self.model.invocations[g.value] for g in TaskGroup}

    def reset_counters(self) -> None:
        self.model.invocations.clear()

    def infer(self, video: VideoSample, task: TaskId) -> InferenceResult:
        return self.infer_many([(video, TaskId(task))])[0]

    def _generate(self, examples: Sequence[Example], group: TaskGroup) -> list[str]:
        texts: list[str] = []
        for i in range(0, len(examples), self.batch_size):
            gens = self.model.generate(examples[i:i + self.batch_size], group, self.max_new_tokens)
            texts.extend(g.text for g in gens)
        return texts

    def infer_many(self, queries: Sequence[tuple[VideoSample, TaskId]]) -> list[InferenceResult]:
        self.model.eval()
        tokens: dict[str, object] = {}
        stage1: list[Example] = []
        for video, task in queries:
            if video.video_id not in tokens:
                tokens[video.video_id] = self.model.encode_video(video)
            # localization queries are gated by a recognition prompt
            q = QUESTIONS[TaskId.RECOGNITION] if task in PC_TASKS else QUESTIONS[task]
            stage1.append(self.model.make_example(tokens[video.video_id], q))
        s1_texts = self._generate(stage1, TaskGroup.LC)

        verdicts: list[bool | None] = []
        s1_flags: list[tuple[str, ...]] = []
        pending: list[int] = []
        for i, ((video, task), text) in enumerate(zip(queries, s1_texts)):
            if task in TEXT_TASKS:
                verdicts.append(None)
                s1_flags.append(())
                continue
            rec = parse_answer(text, TaskId.RECOGNITION, video.duration, video.video_id)
            verdicts.append(bool(rec.parsed) if not rec.failed else False)
            s1_flags.append(("stage1_unparsed",) if rec.failed else ())
            if task in PC_TASKS and verdicts[-1]:
                pending.append(i)

        stage2 = [self.model.make_example(tokens[queries[i][0].video_id], QUESTIONS[queries[i][1]]) for i in pending]
        s2_texts = dict(zip(pending, self._generate(stage2, TaskGroup.PC)))

        out = []
        for i, ((video, task), text) in enumerate(zip(queries, s1_texts)):
            if task in PC_TASKS:
                if i in s2_texts:
                    final = parse_answer(s2_texts[i], task, video.duration, video.video_id)
                else:
                    final = parse_answer(REFUSAL_TEXT, task, video.duration, video.video_id)
                    final = PredictionRecord(final.video_id, task, final.raw_text, None, final.flags + ("gated",))
            else:
                final = parse_answer(text, task, video.duration, video.video_id)
            if s1_flags[i]:
                final = PredictionRecord(final.video_id, final.task, final.raw_text, final.parsed,
                                         final.flags + s1_flags[i])
            out.append(InferenceResult(text, verdicts[i], s2_texts.get(i), final))
        return out


def predict(chat: CrashChat, samples: Iterable[VideoSample], tasks: Sequence[TaskId]) -> list[PredictionRecord]:
    """Answer every task for every video (localization is gated per video)."""
    queries = [(s, TaskId(t)) for s in sorted(samples, key=lambda s: s.video_id) for t in tasks]
    return [r.final for r in chat.infer_many(queries)]
