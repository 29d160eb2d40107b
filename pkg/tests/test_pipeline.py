import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from crashchat.model import build_model
from crashchat.pipeline import CrashChat, parse_answer, predict
from crashchat.schema import (
    PC_TASKS,
    REFUSAL_TEXT,
    TaskGroup,
    TaskId,
    TemporalAnnotation,
    VideoSample,
    format_crash_interval,
    format_precrash_point,
)

E, F = TaskId.CRASH_LOCALIZATION, TaskId.PRECRASH_LOCALIZATION


# --- parsing -----------------------------------------------------------------


def test_parse_recognition():
    assert parse_answer("Yes, the video contains a crash.", "a", 10).parsed is True
    assert parse_answer("no crash here", "a", 10).parsed is False
    assert parse_answer("The answer is yes", "a", 10).failed


def test_parse_crash_interval_canonical_and_loose():
    assert parse_answer(format_crash_interval(2.5, 4.0), E, 10).parsed == (2.5, 4.0)
    assert parse_answer("between 3 and 5", E, 10).parsed == (3.0, 5.0)
    assert parse_answer("only 3", E, 10).failed


def test_parse_interval_clamps_and_swaps():
    r = parse_answer("The crash occurs from 9.0s to 12.5s.", E, 10)
    assert r.parsed == (9.0, 10.0) and "clamped" in r.flags
    r = parse_answer("The crash occurs from 6.0s to 4.0s.", E, 10)
    assert r.parsed == (4.0, 6.0) and "swapped" in r.flags


def test_parse_precrash_point():
    assert parse_answer(format_precrash_point(1.5), F, 10).parsed == 1.5
    assert parse_answer("around 2", F, 10).parsed == 2.0
    assert parse_answer(REFUSAL_TEXT, F, 10).failed


def test_parse_text_tasks_pass_through():
    r = parse_answer("A cyclist crosses.", "b", 10, "v")
    assert r.parsed == "A cyclist crosses." and r.video_id == "v"


@given(st.floats(0, 30), st.floats(0, 30), st.floats(1, 30))
def test_parsed_interval_is_ordered_and_in_range(a, b, duration):
    r = parse_answer(f"The crash occurs from {a:.1f}s to {b:.1f}s.", E, duration)
    t1, t2 = r.parsed
    assert 0 <= t1 <= t2 <= duration


@given(st.text(max_size=60), st.sampled_from(list(TaskId)))
def test_parser_never_raises(text, task):
    parse_answer(text, task, 10.0)


# --- gating --------------------------------------------------------------------


class ScriptedModel(torch.nn.Module):
    """Stand-in whose stage-1 verdicts are fixed per video."""

    def __init__(self, verdicts):
        super().__init__()
        self.inner = build_model(layers=1)
        self.verdicts = verdicts
        self.invocations = self.inner.invocations

    def encode_video(self, video):
        return video.video_id

    def make_example(self, video_id, question):
        return (video_id, question)

    def generate(self, examples, group, max_new_tokens):
        self.invocations[TaskGroup(group).value] += len(examples)

        class G:
            def __init__(self, text):
                self.text = text

        out = []
        for vid, q in examples:
            if group is TaskGroup.LC:
                if "traffic crash" in q:
                    out.append(G("Yes, the video contains a crash." if self.verdicts[vid] else "No."))
                else:
                    out.append(G("Some text."))
            elif "first signs" in q:
                out.append(G(format_precrash_point(1.0)))
            else:
                out.append(G(format_crash_interval(2.0, 3.0)))
        return out


def _videos(labels):
    out = []
    for i, lab in enumerate(labels):
        ann = TemporalAnnotation(1, 2, 3, 5) if lab else None
        out.append(VideoSample(f"v{i}", np.zeros((50, 16)), 10.0, lab, ann))
    return out


def test_stage2_runs_only_for_stage1_positives():
    videos = _videos([True, True, False, False])
    verdicts = {"v0": True, "v1": False, "v2": True, "v3": False}
    chat = CrashChat(ScriptedModel(verdicts))
    results = chat.infer_many([(v, t) for v in videos for t in TaskId])
    n_positive_loc = sum(1 for v in videos for t in PC_TASKS if verdicts[v.video_id])
    assert chat.invocations["Pc"] == n_positive_loc == 4
    for r in results:
        task = r.final.task
        if task in PC_TASKS:
            if r.stage1_positive:
                assert r.stage2_text is not None and not r.final.failed
            else:
                assert r.stage2_text is None
                assert r.final.raw_text == REFUSAL_TEXT and "gated" in r.final.flags and r.final.failed
        elif task is not TaskId.RECOGNITION:
            assert r.stage1_positive is None


def test_all_negative_split_never_calls_pc():
    videos = _videos([False] * 5)
    chat = CrashChat(ScriptedModel({v.video_id: False for v in videos}))
    predict(chat, videos, list(TaskId))
    assert chat.invocations["Pc"] == 0
    assert chat.invocations["Lc"] == 5 * 6


def test_unparsed_stage1_is_treated_as_negative():
    class Garbled(ScriptedModel):
        def generate(self, examples, group, max_new_tokens):
            out = super().generate(examples, group, max_new_tokens)
            for o in out:
                o.text = "hmm"
            return out

    v = _videos([True])
    chat = CrashChat(Garbled({"v0": True}))
    (rec,) = chat.infer_many([(v[0], E)])
    assert rec.stage1_positive is False and "stage1_unparsed" in rec.final.flags
    assert chat.invocations["Pc"] == 0


def test_real_model_inference_is_deterministic():
    m = build_model(layers=1)
    videos = _videos([True, False])
    chat = CrashChat(m, max_new_tokens=5)
    a = predict(chat, videos, list(TaskId))
    b = predict(chat, videos, list(TaskId))
    assert [p.to_json() for p in a] == [p.to_json() for p in b]
    assert len(a) == 12
