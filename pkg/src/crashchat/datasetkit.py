"""Dataset construction: manifest ingestion, synthetic videos, QA templating, splits.

A dataset directory is a manifest (JSON-lines, one entry per video) plus
optional ``features/<videoId>.npy`` frame arrays, ``qa.jsonl`` and the
split files ``train.jsonl``/``val.jsonl``/``test.jsonl`` (each itself a
manifest) with ``split_index.json``.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, NamedTuple, Sequence

import numpy as np

from .schema import (
    ALL_TASKS,
    NEGATIVE_TASKS,
    QAPair,
    SchemaError,
    Source,
    TaskId,
    TemporalAnnotation,
    VideoSample,
    dumps,
    format_crash_interval,
    format_precrash_point,
    round_time,
    write_jsonl,
)

log = logging.getLogger(__name__)

QUESTIONS: dict[TaskId, str] = {
    TaskId.RECOGNITION: "Does this video contain a traffic crash?",
    TaskId.DESCRIPTION: "Describe the crash in this video.",
    TaskId.CAUSAL_REASONING: "What is the cause of the crash?",
    TaskId.PREVENTION_REASONING: "How could the crash have been prevented?",
    TaskId.CRASH_LOCALIZATION: "When does the crash occur in this video?",
    TaskId.PRECRASH_LOCALIZATION: "When do the first signs of an imminent crash appear?",
}

POSITIVE_RECOGNITION = "Yes, the video contains a crash."
NEGATIVE_RECOGNITION = "No, the video does not contain a crash."

NEGATIVE_DESCRIPTION = "No crash occurred. The vehicle drives normally{setting}."
NEGATIVE_CAUSE = "No crash occurred, so there is no cause."
NEGATIVE_PREVENTION = "No crash occurred, so no prevention is needed."

SETTINGS = ("", " on a sunny day", " at night", " in the rain")

# (description, cause, prevention); description takes the scene setting.
CRASH_TYPES: tuple[tuple[str, str, str], ...] = (
    (
        "The ego vehicle hits the back of a white truck that brakes suddenly{setting}.",
        "The truck ahead brakes suddenly and the ego vehicle follows too closely.",
        "The ego vehicle should keep a safe distance and brake earlier.",
    ),
    (
        "A cyclist crosses the road and is hit by the ego vehicle{setting}.",
        "The cyclist crosses the road without looking at traffic.",
        "The driver should slow down near cyclists and watch the road edge.",
    ),
    (
        "A pedestrian steps onto the road and is struck by a car{setting}.",
        "The pedestrian enters the road suddenly between parked cars.",
        "The driver should reduce speed and watch for pedestrians.",
    ),
    (
        "Two cars collide at an intersection when one turns left{setting}.",
        "The turning car fails to yield to oncoming traffic.",
        "The turning car should yield and wait for a safe gap.",
    ),
)


def template_corpus() -> list[str]:
    """Every string the templates can produce, minus timestamps (for vocab building)."""
    out = list(QUESTIONS.values())
    out += [POSITIVE_RECOGNITION, NEGATIVE_RECOGNITION, NEGATIVE_CAUSE, NEGATIVE_PREVENTION]
    for s in SETTINGS:
        out.append(NEGATIVE_DESCRIPTION.format(setting=s))
        out += [c[0].format(setting=s) for c in CRASH_TYPES]
    for c in CRASH_TYPES:
        out += list(c[1:])
    out += [format_crash_interval(0.0, 9.9), format_precrash_point(0.0)]
    return out


class DatasetError(Exception):
    pass


class ManifestError(DatasetError):
    """The manifest file itself cannot be read."""


class MissingTextError(DatasetError):
    pass


@dataclass(frozen=True)
class ReferenceTexts:
    description: str | None = None
    cause: str | None = None
    prevention: str | None = None

    def for_task(self, task: TaskId) -> str | None:
        return {
            TaskId.DESCRIPTION: self.description,
            TaskId.CAUSAL_REASONING: self.cause,
            TaskId.PREVENTION_REASONING: self.prevention,
        }[task]


@dataclass(frozen=True)
class EntryError:
    line: int
    video_id: str | None
    reason: str


@dataclass
class Corpus:
    samples: list[VideoSample]
    texts: dict[str, ReferenceTexts]
    errors: list[EntryError] = field(default_factory=list)
    # videoId -> path of a stored feature file, relative to the manifest
    feature_paths: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def by_id(self) -> dict[str, VideoSample]:
        return {s.video_id: s for s in self.samples}

    def subset(self, samples: Iterable[VideoSample]) -> "Corpus":
        samples = list(samples)
        ids = {s.video_id for s in samples}
        return Corpus(
            samples,
            {k: v for k, v in self.texts.items() if k in ids},
            [],
            {k: v for k, v in self.feature_paths.items() if k in ids},
        )


# --------------------------------------------------------------------------
# manifest ingestion
# --------------------------------------------------------------------------

DEFAULT_FPS = 10.0
DEFAULT_DURATION = 10.0
DEFAULT_FEATURE_DIM = 16


def _entry_to_sample(
    entry: dict[str, Any], root: Path, feature_dim: int
) -> tuple[VideoSample, ReferenceTexts, str | None]:
    vid = entry.get("videoId")
    if not isinstance(vid, str) or not vid:
        raise SchemaError("missing videoId")
    label = entry.get("label")
    if not isinstance(label, bool):
        raise SchemaError("label must be a boolean")
    ann_obj = entry.get("annotation")
    if label and ann_obj is None:
        raise SchemaError("missing annotation")
    if not label and ann_obj is not None:
        raise SchemaError("negative entry carries an annotation")
    ann = TemporalAnnotation.from_json(ann_obj) if ann_obj is not None else None
    texts = ReferenceTexts(
        entry.get("descriptionText"), entry.get("causeText"), entry.get("preventionText")
    )
    if label:
        missing = [k for k, v in zip(("descriptionText", "causeText", "preventionText"), asdict(texts).values()) if not v]
        if missing:
            raise SchemaError(f"missing {', '.join(missing)}")
    try:
        source = Source(entry.get("source", Source.SYNTHETIC.value))
    except ValueError:
        raise SchemaError(f"unknown source {entry.get('source')!r}") from None
    fps = float(entry.get("fps", DEFAULT_FPS))
    if not fps > 0:
        raise SchemaError("fps must be > 0")

    rel = entry.get("featuresPath")
    if rel:
        path = root / rel
        try:
            frames = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise SchemaError(f"unreadable features {rel}: {exc}") from exc
    else:
        duration = float(entry.get("duration", ann.duration if ann else DEFAULT_DURATION))
        n = max(1, int(round(duration * fps)))
        # placeholder: a zero-cost read-only view
        frames = np.broadcast_to(np.zeros((1, feature_dim)), (n, feature_dim))
    sample = VideoSample(vid, frames, fps, label, ann, source)
    if ann is not None and ann.duration > sample.duration + 1e-6:
        raise SchemaError(
            f"annotation duration {ann.duration} exceeds video length {sample.duration:.3f}"
        )
    return sample, texts, rel


def ingest_manifest(path: str | os.PathLike, feature_dim: int = DEFAULT_FEATURE_DIM) -> Corpus:
    """Read a JSON-lines manifest into VideoSamples.

    Malformed entries are skipped and reported in ``Corpus.errors``; an
    unreadable manifest raises :class:`ManifestError`.
    """
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc

    samples: list[VideoSample] = []
    texts: dict[str, ReferenceTexts] = {}
    feature_paths: dict[str, str] = {}
    errors: list[EntryError] = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        vid = None
        try:
            entry = json.loads(line)
            if not isinstance(entry, dict):
                raise SchemaError("entry is not an object")
            vid = entry.get("videoId")
            if vid in texts:
                raise SchemaError("duplicate videoId")
            sample, txt, rel = _entry_to_sample(entry, path.parent, feature_dim)
        except json.JSONDecodeError as exc:
            errors.append(EntryError(lineno, None, f"invalid JSON: {exc.msg}"))
            continue
        except (SchemaError, ValueError, TypeError) as exc:
            errors.append(EntryError(lineno, vid if isinstance(vid, str) else None, str(exc)))
            continue
        samples.append(sample)
        texts[sample.video_id] = txt
        if rel:
            feature_paths[sample.video_id] = rel
    for err in errors:
        log.warning("manifest %s line %d (%s): %s", path, err.line, err.video_id, err.reason)
    return Corpus(samples, texts, errors, feature_paths)


def manifest_entry(sample: VideoSample, texts: ReferenceTexts | None, features_path: str | None) -> dict[str, Any]:
    entry: dict[str, Any] = {
        "videoId": sample.video_id,
        "source": sample.source.value,
        "label": sample.label,
        "fps": sample.fps,
    }
    if features_path:
        entry["featuresPath"] = features_path
    else:
        entry["duration"] = round_time(sample.duration)
    if sample.annotation is not None:
        entry["annotation"] = sample.annotation.to_json()
    if texts is not None:
        for key, val in zip(("descriptionText", "causeText", "preventionText"), asdict(texts).values()):
            if val:
                entry[key] = val
    return entry


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_corpus(corpus: Corpus, out_dir: str | os.PathLike, manifest_name: str = "manifest.jsonl",
                write_features: bool = True) -> Path:
    """Write a manifest (plus feature files) that :func:`ingest_manifest` reads back."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in sorted(corpus.samples, key=lambda s: s.video_id):
        rel = corpus.feature_paths.get(s.video_id)
        if write_features and rel is None:
            rel = f"features/{s.video_id}.npy"
            (out / "features").mkdir(exist_ok=True)
            (out / rel).write_bytes(_npy_bytes(s.frames))
            corpus.feature_paths[s.video_id] = rel
        entries.append(manifest_entry(s, corpus.texts.get(s.video_id), rel))
    manifest = out / manifest_name
    write_jsonl(manifest, entries)
    return manifest


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AnomalySignature:
    """Shape of the injected crash signal in feature space.

    From the pre-crash start the frame mean jumps by ``drift_step`` along a
    crash-type direction and keeps rising by ``drift_slope`` per second;
    during the crash an extra zero-mean noise of std ``spike_scale`` is added.
    """

    drift_step: float = 3.0
    drift_slope: float = 0.25
    spike_scale: float = 2.0
    scene_scale: float = 0.75


@dataclass(frozen=True)
class SyntheticConfig:
    num_positive: int = 200
    num_negative: int = 200
    fps: float = 10.0
    duration_range: tuple[float, float] = (8.0, 12.0)
    feature_dim: int = 16
    noise_scale: float = 0.5
    signature: AnomalySignature = field(default_factory=AnomalySignature)
    pre_crash_range: tuple[float, float] = (1.0, 3.0)
    crash_range: tuple[float, float] = (1.5, 3.0)
    # annotation times are multiples of this (seconds)
    time_grid: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_positive < 0 or self.num_negative < 0:
            raise ValueError("counts must be >= 0")
        if not self.fps > 0 or self.feature_dim < 1 or self.time_grid <= 0:
            raise ValueError("fps, feature_dim and time_grid must be positive")
        lo, hi = self.duration_range
        need = self.pre_crash_range[1] + self.crash_range[1] + 2 * self.time_grid + 1.0
        if not 0 < lo <= hi or lo < need:
            raise ValueError(f"duration_range {self.duration_range} too short (need >= {need})")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SyntheticConfig":
        d = dict(d)
        if "signature" in d and isinstance(d["signature"], dict):
            d["signature"] = AnomalySignature(**d["signature"])
        for key in ("duration_range", "pre_crash_range", "crash_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _grid_choice(rng: np.random.Generator, lo: float, hi: float, grid: float) -> float:
    k_lo, k_hi = math.ceil(lo / grid - 1e-9), math.floor(hi / grid + 1e-9)
    return round_time(grid * int(rng.integers(k_lo, k_hi + 1)))


def _directions(cfg: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, 0])
    crash = rng.standard_normal((len(CRASH_TYPES), cfg.feature_dim))
    crash /= np.linalg.norm(crash, axis=1, keepdims=True)
    scene = rng.standard_normal((len(SETTINGS), cfg.feature_dim))
    scene /= np.linalg.norm(scene, axis=1, keepdims=True)
    return crash, scene


def _synth_one(cfg: SyntheticConfig, index: int, positive: bool,
               crash_dirs: np.ndarray, scene_dirs: np.ndarray) -> tuple[VideoSample, ReferenceTexts]:
    rng = np.random.default_rng([cfg.seed, 1, int(positive), index])
    sig = cfg.signature
    duration = _grid_choice(rng, *cfg.duration_range, cfg.time_grid)
    n = int(round(duration * cfg.fps))
    setting = int(rng.integers(len(SETTINGS)))
    frames = cfg.noise_scale * rng.standard_normal((n, cfg.feature_dim))
    frames += sig.scene_scale * scene_dirs[setting]
    vid = f"syn-{'pos' if positive else 'neg'}-{index:05d}"
    if not positive:
        texts = ReferenceTexts(
            NEGATIVE_DESCRIPTION.format(setting=SETTINGS[setting]), NEGATIVE_CAUSE, NEGATIVE_PREVENTION
        )
        return VideoSample(vid, frames, cfg.fps, False, None, Source.SYNTHETIC), texts

    kind = int(rng.integers(len(CRASH_TYPES)))
    pre_len = _grid_choice(rng, *cfg.pre_crash_range, cfg.time_grid)
    crash_len = _grid_choice(rng, *cfg.crash_range, cfg.time_grid)
    t_ar = _grid_choice(rng, 1.0, duration - pre_len - crash_len - cfg.time_grid, cfg.time_grid)
    t_ai = round_time(t_ar + pre_len)
    t_end = round_time(t_ai + crash_len)
    i_ar = math.floor(t_ar * cfg.fps + 1e-9)
    i_ai = math.floor(t_ai * cfg.fps + 1e-9)
    i_end = math.floor(t_end * cfg.fps + 1e-9)
    secs = (np.arange(n - i_ar) / cfg.fps)[:, None]
    frames[i_ar:] += (sig.drift_step + sig.drift_slope * secs) * crash_dirs[kind]
    frames[i_ai:i_end] += sig.spike_scale * rng.standard_normal((i_end - i_ai, cfg.feature_dim))
    ann = TemporalAnnotation(t_ar, t_ai, t_end, duration)
    desc, cause, prevention = CRASH_TYPES[kind]
    texts = ReferenceTexts(desc.format(setting=SETTINGS[setting]), cause, prevention)
    return VideoSample(vid, frames, cfg.fps, True, ann, Source.SYNTHETIC), texts


def generate_synthetic(cfg: SyntheticConfig) -> Corpus:
    """Deterministic desk-scale stand-in for real crash/normal dashcam clips.

    Each video is drawn from its own seeded stream, so output for a video
    does not depend on how many others are generated.
    """
    dirs = _directions(cfg)
    samples, texts = [], {}
    for positive, count in ((True, cfg.num_positive), (False, cfg.num_negative)):
        for i in range(count):
            s, t = _synth_one(cfg, i, positive, *dirs)
            samples.append(s)
            texts[s.video_id] = t
    samples.sort(key=lambda s: s.video_id)
    return Corpus(samples, texts)


def crop_start(sample: VideoSample, seconds: float) -> VideoSample:
    """Drop the first ``seconds`` of a clip and re-base its annotation.

    The crop is rounded to whole frames; the new id records the frame count.
    """
    k = int(round(seconds * sample.fps))
    if not 0 <= k < sample.num_frames:
        raise ValueError(f"cannot crop {k} of {sample.num_frames} frames from {sample.video_id}")
    ann = sample.annotation
    if ann is not None:
        secs = k / sample.fps
        if ann.pre_crash_start < secs:
            raise ValueError(f"crop of {secs}s cuts into the annotated pre-crash phase of {sample.video_id}")
        ann = TemporalAnnotation(round_time(ann.pre_crash_start - secs), round_time(ann.crash_start - secs),
                                 round_time(ann.crash_end - secs), round_time(ann.duration - secs),
                                 ann.tolerance)
    return VideoSample(f"{sample.video_id}~{k}", sample.frames[k:], sample.fps, sample.label, ann, sample.source)


# --------------------------------------------------------------------------
# QA pairs
# --------------------------------------------------------------------------


def reference_answer(sample: VideoSample, task: TaskId, texts: ReferenceTexts | None) -> str:
    if task is TaskId.RECOGNITION:
        return POSITIVE_RECOGNITION if sample.label else NEGATIVE_RECOGNITION
    if task in (TaskId.CRASH_LOCALIZATION, TaskId.PRECRASH_LOCALIZATION):
        ann = sample.annotation
        if ann is None:
            raise MissingTextError(f"{sample.video_id}: task {task.value} needs an annotation")
        if task is TaskId.CRASH_LOCALIZATION:
            return format_crash_interval(ann.crash_start, ann.crash_end)
        return format_precrash_point(ann.pre_crash_start)
    text = texts.for_task(task) if texts is not None else None
    if not text and not sample.label:
        text = {
            TaskId.DESCRIPTION: NEGATIVE_DESCRIPTION.format(setting=""),
            TaskId.CAUSAL_REASONING: NEGATIVE_CAUSE,
            TaskId.PREVENTION_REASONING: NEGATIVE_PREVENTION,
        }[task]
    if not text:
        raise MissingTextError(f"{sample.video_id}: missing reference text for task {task.value}")
    return text


def tasks_for(sample: VideoSample) -> tuple[TaskId, ...]:
    return ALL_TASKS if sample.label else NEGATIVE_TASKS


def build_qa_pairs(samples: Sequence[VideoSample], texts: dict[str, ReferenceTexts]) -> list[QAPair]:
    """Six pairs per positive video (tasks a-f), four per negative (a-d)."""
    out = []
    for s in sorted(samples, key=lambda s: s.video_id):
        t = texts.get(s.video_id)
        for task in tasks_for(s):
            out.append(QAPair(s.video_id, task, QUESTIONS[task], reference_answer(s, task, t)))
    return out


# --------------------------------------------------------------------------
# stratified split
# --------------------------------------------------------------------------

SUBSETS = ("train", "val", "test")


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ValueError(f"ratios must be three non-negative fractions, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(self.ratios)}")


class Split(NamedTuple):
    train: list[VideoSample]
    val: list[VideoSample]
    test: list[VideoSample]


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer allocation of ``n`` items by ``ratios`` (Hamilton's method)."""
    quotas = [n * r for r in ratios]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(samples: Sequence[VideoSample], spec: SplitSpec = SplitSpec()) -> Split:
    """Class-stratified train/val/test partition, deterministic given ``spec.seed``."""
    parts: list[list[VideoSample]] = [[], [], []]
    for label in (True, False):
        members = sorted((s for s in samples if s.label == label), key=lambda s: s.video_id)
        if not members:
            continue
        nonzero = sum(1 for r in spec.ratios if r > 0)
        if len(members) < nonzero:
            log.warning(
                "only %d %s samples for %d subsets; placing all in train",
                len(members), "positive" if label else "negative", nonzero,
            )
            parts[0].extend(members)
            continue
        rng = np.random.default_rng([spec.seed, int(label)])
        perm = rng.permutation(len(members))
        counts = largest_remainder(len(members), spec.ratios)
        start = 0
        for k, c in enumerate(counts):
            parts[k].extend(members[i] for i in perm[start:start + c])
            start += c
    return Split(*(sorted(p, key=lambda s: s.video_id) for p in parts))


def save_split(split: Split, corpus: Corpus, out_dir: str | os.PathLike) -> dict[str, str]:
    """Write one manifest per subset plus ``split_index.json``.

    Returns the videoId -> subset mapping.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index: dict[str, str] = {}
    for name, subset in zip(SUBSETS, split):
        entries = []
        for s in subset:
            entries.append(manifest_entry(s, corpus.texts.get(s.video_id), corpus.feature_paths.get(s.video_id)))
            index[s.video_id] = name
        write_jsonl(out / f"{name}.jsonl", entries)
    (out / "split_index.json").write_text(dumps(dict(sorted(index.items()))) + "\n", encoding="utf-8")
    return index


def load_split(dataset_dir: str | os.PathLike, feature_dim: int = DEFAULT_FEATURE_DIM) -> dict[str, Corpus]:
    d = Path(dataset_dir)
    out = {}
    for name in SUBSETS:
        corpus = ingest_manifest(d / f"{name}.jsonl", feature_dim)
        if corpus.errors:
            raise DatasetError(f"{name}.jsonl has {len(corpus.errors)} invalid entries")
        out[name] = corpus
    return out
