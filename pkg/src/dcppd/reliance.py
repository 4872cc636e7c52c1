"""Attention reliance scores: how much generation attends to cue tokens vs image tokens."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class RelianceError(ValueError):
    pass


@dataclass
class AttentionTrace:
    """Per-step attention ``[T, S]`` over prompt positions plus region index sets."""

    attn: np.ndarray
    r_text: tuple[int, ...]
    r_image: tuple[int, ...]
    r_query: tuple[int, ...] = ()

    def __post_init__(self):
        self.attn = np.asarray(self.attn, dtype=np.float64)
        if self.attn.ndim != 2:
            raise RelianceError(f"trace must be [T, S], got shape {self.attn.shape}")
        if set(self.r_text) & set(self.r_image):
            raise RelianceError("text and image regions overlap")

    @property
    def steps(self) -> int:
        return self.attn.shape[0]

    def header(self) -> dict:
        return {"shape": list(self.attn.shape), "r_text": list(self.r_text),
                "r_image": list(self.r_image), "r_query": list(self.r_query)}


@dataclass(frozen=True)
class RelianceResult:
    m_text: float
    m_image: float
    s_text: float
    s_image: float


def region_mass(trace: AttentionTrace, region: Sequence[int]) -> float:
    """Attention mass on ``region`` averaged over its positions and over decoding steps."""
    region = list(region)
    if not region:
        raise RelianceError("attention region is empty")
    if trace.steps < 1:
        raise RelianceError("trace has no decoding steps")
    return float(trace.attn[:, region].mean(axis=1).mean())


def reliance_scores(m_text: float, m_image: float) -> RelianceResult:
    total = m_text + m_image
    if not total > 0:
        raise RelianceError("degenerate trace: text and image masses are both zero")
    s_text = m_text / total
    return RelianceResult(m_text, m_image, s_text, 1.0 - s_text)


def trace_reliance(trace: AttentionTrace) -> RelianceResult:
    return reliance_scores(region_mass(trace, trace.r_text), region_mass(trace, trace.r_image))


@dataclass(frozen=True)
class RelianceSummary:
    setting: str
    n: int
    mean_s_text: float
    std_s_text: float

    @property
    def mean_s_image(self) -> float:
        return 1.0 - self.mean_s_text


def reliance_report(traces: Iterable, setting: str = "") -> RelianceSummary:
    """Sample mean and unbiased std of ``S_text`` over traces (or precomputed results)."""
    values = []
    for t in traces:
        if isinstance(t, AttentionTrace):
            t = trace_reliance(t)
        values.append(t.s_text if isinstance(t, RelianceResult) else float(t))
    if len(values) < 2:
        raise RelianceError(f"need at least 2 traces for a spread estimate, got {len(values)}")
    arr = np.asarray(values)
    return RelianceSummary(setting, len(arr), float(arr.mean()), float(arr.std(ddof=1)))


def summary_csv(summaries: Sequence[RelianceSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setting", "mean_S_text", "std_S_text"])
    for s in summaries:
        w.writerow([s.setting, f"{s.mean_s_text:.6f}", f"{s.std_s_text:.6f}"])
    return buf.getvalue()


def save_trace(trace: AttentionTrace, path: os.PathLike) -> None:
    """Write a trace: JSON region header in the container metadata, float32 ``[T, S]`` body."""
    from .io import save_tensors

    save_tensors(path, {"attention": trace.attn.astype(np.float32)}, {"regions": trace.header()})


def load_trace(path: os.PathLike) -> AttentionTrace:
    from .io import load_tensors

    tensors, header = load_tensors(path)
    regions = header["regions"]
    return AttentionTrace(tensors["attention"], tuple(regions["r_text"]), tuple(regions["r_image"]),
                          tuple(regions["r_query"]))
