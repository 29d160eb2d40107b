"""Desk-scale crash video question answering with task-decoupled low-rank adapters."""

from .schema import QAPair, PredictionRecord, TaskGroup, TaskId, TemporalAnnotation, VideoSample

__all__ = ["QAPair", "PredictionRecord", "TaskGroup", "TaskId", "TemporalAnnotation", "VideoSample"]
__version__ = "0.1.0"
