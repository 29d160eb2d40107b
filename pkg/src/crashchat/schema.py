"""Shared domain types: the six-task taxonomy, videos, QA pairs and predictions.

Every record here is immutable and serializes to one JSON object with
camelCase field names, so datasets and predictions can be written as
JSON-lines files and diffed byte for byte.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Union

import numpy as np

# 0.1 s serialization precision for every timestamp.
TIME_DECIMALS = 1

REFUSAL_TEXT = "No crash is detected in this video."


class TaskGroup(str, enum.Enum):
    LC = "Lc"  # linguistic-centric
    PC = "Pc"  # perception-centric

    def __str__(self) -> str:
        return self.value


class TaskId(str, enum.Enum):
    RECOGNITION = "a"
    DESCRIPTION = "b"
    CAUSAL_REASONING = "c"
    PREVENTION_REASONING = "d"
    CRASH_LOCALIZATION = "e"
    PRECRASH_LOCALIZATION = "f"

    def __str__(self) -> str:
        return self.value

    @property
    def group(self) -> TaskGroup:
        return group_of(self)

    @property
    def title(self) -> str:
        return _TITLES[self]

    @classmethod
    def parse(cls, value: Union[str, "TaskId"]) -> "TaskId":
        """Accept a letter (``"e"``) or a member name (``"CRASH_LOCALIZATION"``)."""
        if isinstance(value, cls):
            return value
        text = str(value).strip()
        try:
            return cls(text.lower())
        except ValueError:
            pass
        try:
            return cls[text.upper()]
        except KeyError:
            raise ValueError(f"unknown task {value!r}") from None


_TITLES = {
    TaskId.RECOGNITION: "Crash Recognition",
    TaskId.DESCRIPTION: "Crash Description",
    TaskId.CAUSAL_REASONING: "Causal Reasoning",
    TaskId.PREVENTION_REASONING: "Prevention Reasoning",
    TaskId.CRASH_LOCALIZATION: "Crash Localization",
    TaskId.PRECRASH_LOCALIZATION: "Pre-crash Localization",
}

LC_TASKS = (
    TaskId.RECOGNITION,
    TaskId.DESCRIPTION,
    TaskId.CAUSAL_REASONING,
    TaskId.PREVENTION_REASONING,
)
PC_TASKS = (TaskId.CRASH_LOCALIZATION, TaskId.PRECRASH_LOCALIZATION)
ALL_TASKS = LC_TASKS + PC_TASKS
TEXT_TASKS = LC_TASKS[1:]
NEGATIVE_TASKS = LC_TASKS


def group_of(task: TaskId) -> TaskGroup:
    """Return the task group a task is routed to."""
    return TaskGroup.PC if TaskId(task) in PC_TASKS else TaskGroup.LC


def tasks_in(group: TaskGroup) -> tuple[TaskId, ...]:
    return LC_TASKS if TaskGroup(group) is TaskGroup.LC else PC_TASKS


def parse_task_list(spec: str) -> list[TaskId]:
    """``"a,b,e"`` -> [RECOGNITION, DESCRIPTION, CRASH_LOCALIZATION]."""
    return [TaskId.parse(t) for t in spec.split(",") if t.strip()]


class Source(str, enum.Enum):
    MM_AU = "MM-AU"
    NEXAR = "Nexar"
    D2CITY = "D2City"
    SYNTHETIC = "Synthetic"


def round_time(t: float) -> float:
    return round(float(t), TIME_DECIMALS)


def format_crash_interval(start: float, end: float) -> str:
    return f"The crash occurs from {start:.1f}s to {end:.1f}s."


def format_precrash_point(t: float) -> str:
    return f"Signs of an imminent crash first appear at {t:.1f}s."


class SchemaError(ValueError):
    """A record violates one of its invariants."""


@dataclass(frozen=True)
class TemporalAnnotation:
    """Crash timing for a positive video, in seconds.

    ``pre_crash_start`` is when the first cue of the imminent crash is
    visible, ``crash_start`` is crash onset (the end of the pre-crash phase).
    """

    pre_crash_start: float
    crash_start: float
    crash_end: float
    duration: float
    tolerance: float = 0.5

    def __post_init__(self) -> None:
        vals = (self.pre_crash_start, self.crash_start, self.crash_end, self.duration)
        if not all(math.isfinite(v) for v in vals):
            raise SchemaError(f"non-finite annotation times {vals}")
        if not 0.0 <= self.pre_crash_start <= self.crash_start <= self.crash_end <= self.duration:
            raise SchemaError(
                "annotation must satisfy 0 <= preCrashStart <= crashStart <= crashEnd <= duration, "
                f"got {vals}"
            )
        if not self.tolerance > 0:
            raise SchemaError(f"tolerance must be > 0, got {self.tolerance}")

    def to_json(self) -> dict[str, float]:
        return {
            "preCrashStart": round_time(self.pre_crash_start),
            "crashStart": round_time(self.crash_start),
            "crashEnd": round_time(self.crash_end),
            "duration": round_time(self.duration),
            "tolerance": self.tolerance,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "TemporalAnnotation":
        try:
            return cls(
                pre_crash_start=float(obj["preCrashStart"]),
                crash_start=float(obj["crashStart"]),
                crash_end=float(obj["crashEnd"]),
                duration=float(obj["duration"]),
                tolerance=float(obj.get("tolerance", 0.5)),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad annotation {obj!r}: {exc}") from exc


@dataclass(frozen=True, eq=False)
class VideoSample:
    """A sequence of frame feature vectors with its crash label.

    ``frames`` has shape ``(num_frames, feature_dim)`` and is made read-only.
    """

    video_id: str
    frames: np.ndarray
    fps: float
    label: bool
    annotation: TemporalAnnotation | None = None
    source: Source = Source.SYNTHETIC

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise SchemaError(f"{self.video_id}: frames must be a non-empty 2-D array, got {frames.shape}")
        if not self.fps > 0:
            raise SchemaError(f"{self.video_id}: fps must be > 0")
        if bool(self.label) != (self.annotation is not None):
            raise SchemaError(f"{self.video_id}: label=true iff annotation present")
        if frames.flags.writeable:
            frames = frames.copy()
            frames.flags.writeable = False
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "label", bool(self.label))
        object.__setattr__(self, "source", Source(self.source))

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.frames.shape[1])

    @property
    def duration(self) -> float:
        return self.num_frames / self.fps

    def to_json(self) -> dict[str, Any]:
        """Metadata only; frame features are stored separately."""
        return {
            "videoId": self.video_id,
            "source": self.source.value,
            "label": self.label,
            "fps": self.fps,
            "numFrames": self.num_frames,
            "featureDim": self.feature_dim,
            "duration": round_time(self.duration),
            "annotation": None if self.annotation is None else self.annotation.to_json(),
        }


@dataclass(frozen=True)
class QAPair:
    video_id: str
    task: TaskId
    question: str
    reference_answer: str

    def to_json(self) -> dict[str, Any]:
        return {
            "videoId": self.video_id,
            "task": self.task.value,
            "question": self.question,
            "referenceAnswer": self.reference_answer,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "QAPair":
        return cls(obj["videoId"], TaskId(obj["task"]), obj["question"], obj["referenceAnswer"])


Parsed = Union[bool, tuple[float, float], float, str, None]


@dataclass(frozen=True)
class PredictionRecord:
    """A model answer and its structured reading.

    ``parsed`` is a bool (task a), an ``(start, end)`` tuple (task e), a
    float (task f) or the raw text (tasks b-d). A parse failure keeps
    ``parsed = None`` and carries ``"parse_failure"`` in ``flags``.
    """

    video_id: str
    task: TaskId
    raw_text: str
    parsed: Parsed
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "task", TaskId(self.task))
        object.__setattr__(self, "flags", tuple(self.flags))
        if self.parsed is None:
            if "parse_failure" not in self.flags:
                object.__setattr__(self, "flags", self.flags + ("parse_failure",))
            return
        expected = _PARSED_TYPES[self.task]
        ok = (
            isinstance(self.parsed, bool)
            if expected is bool
            else isinstance(self.parsed, expected) and not isinstance(self.parsed, bool)
        )
        if not ok:
            raise SchemaError(f"task {self.task.value} expects {expected.__name__}, got {self.parsed!r}")

    @property
    def failed(self) -> bool:
        return self.parsed is None

    def to_json(self) -> dict[str, Any]:
        parsed: Any = self.parsed
        if isinstance(parsed, tuple):
            parsed = [round_time(parsed[0]), round_time(parsed[1])]
        elif isinstance(parsed, float):
            parsed = round_time(parsed)
        return {
            "videoId": self.video_id,
            "task": self.task.value,
            "rawText": self.raw_text,
            "parsed": parsed,
            "flags": list(self.flags),
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "PredictionRecord":
        task = TaskId(obj["task"])
        parsed = obj.get("parsed")
        if parsed is not None:
            if task is TaskId.CRASH_LOCALIZATION:
                parsed = (float(parsed[0]), float(parsed[1]))
            elif task is TaskId.PRECRASH_LOCALIZATION:
                parsed = float(parsed)
        return cls(obj["videoId"], task, obj["rawText"], parsed, tuple(obj.get("flags", ())))


_PARSED_TYPES: dict[TaskId, type] = {
    TaskId.RECOGNITION: bool,
    TaskId.DESCRIPTION: str,
    TaskId.CAUSAL_REASONING: str,
    TaskId.PREVENTION_REASONING: str,
    TaskId.CRASH_LOCALIZATION: tuple,
    TaskId.PRECRASH_LOCALIZATION: float,
}


def dumps(obj: Any) -> str:
    """Canonical single-line JSON used for every JSON-lines file."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_jsonl(path, records: Iterable[Any]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            obj = rec.to_json() if hasattr(rec, "to_json") else rec
            fh.write(dumps(obj) + "\n")
            n += 1
    return n


def read_jsonl(path) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
