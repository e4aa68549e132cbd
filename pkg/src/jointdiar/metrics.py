"""Collar-free diarization error rate and VAD/OSD detection errors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


class Annotation:
    """Speaker intervals ``(onset_s, offset_s, label)``; concurrent speakers are
    allowed. Overlapping or touching intervals of one speaker are merged."""

    def __init__(self, intervals=()):
        by_speaker: dict[str, list] = {}
        for on, off, label in intervals:
            on, off = float(on), float(off)
            if not off > on:
                raise ValueError(f"interval onset must precede offset: ({on}, {off})")
            by_speaker.setdefault(str(label), []).append((on, off))
        merged = []
        for label in sorted(by_speaker):
            spans = sorted(by_speaker[label])
            cur_on, cur_off = spans[0]
            for on, off in spans[1:]:
                if on <= cur_off:
                    cur_off = max(cur_off, off)
                else:
                    merged.append((cur_on, cur_off, label))
                    cur_on, cur_off = on, off
            merged.append((cur_on, cur_off, label))
        self.intervals = sorted(merged, key=lambda x: (x[0], x[1], x[2]))

    @property
    def labels(self) -> list[str]:
        return sorted({lab for _, _, lab in self.intervals})

    def __len__(self):
        return len(self.intervals)

    def __iter__(self):
        return iter(self.intervals)

    def __eq__(self, other):
        return isinstance(other, Annotation) and self.intervals == other.intervals

    def __repr__(self):
        return f"Annotation({self.intervals!r})"

    def speaker_time(self) -> float:
        return sum(off - on for on, off, _ in self.intervals)


@dataclass(frozen=True)
class DERBreakdown:
    miss_pct: float
    fa_pct: float
    conf_pct: float
    der_pct: float
    ref_speech_s: float
    miss_s: float = 0.0
    fa_s: float = 0.0
    conf_s: float = 0.0


@dataclass(frozen=True)
class DetectionErrors:
    miss_pct: float
    fa_pct: float


def _as_annotation(x) -> Annotation:
    return x if isinstance(x, Annotation) else Annotation(x)


def _slices(ref: Annotation, hyp: Annotation):
    """Elementary slices between all boundaries with per-speaker activity."""
    bounds = sorted({t for on, off, _ in list(ref) + list(hyp) for t in (on, off)})
    bounds = np.array(bounds, dtype=np.float64)
    if len(bounds) < 2:
        return np.zeros(0), {}, {}
    durations = np.diff(bounds)

    def activity(ann: Annotation):
        acts = {}
        for label in ann.labels:
            delta = np.zeros(len(bounds))
            for on, off, lab in ann:
                if lab == label:
                    delta[np.searchsorted(bounds, on)] += 1
                    delta[np.searchsorted(bounds, off)] -= 1
            acts[label] = np.cumsum(delta)[:-1] > 0
        return acts

    return durations, activity(ref), activity(hyp)


def _mapping_from_activity(durations, ref_act, hyp_act) -> dict[str, str]:
    ref_labels, hyp_labels = sorted(ref_act), sorted(hyp_act)
    if not ref_labels or not hyp_labels:
        return {}
    R = np.array([ref_act[r] for r in ref_labels], dtype=np.float64)
    H = np.array([hyp_act[h] for h in hyp_labels], dtype=np.float64)
    cooccur = (R * durations) @ H.T
    rows, cols = linear_sum_assignment(cooccur, maximize=True)
    return {ref_labels[r]: hyp_labels[c] for r, c in zip(rows, cols)}


def optimal_speaker_mapping(ref, hyp) -> dict[str, str]:
    """One-to-one ``ref label -> hyp label`` maximising total co-occurrence."""
    ref, hyp = _as_annotation(ref), _as_annotation(hyp)
    durations, ref_act, hyp_act = _slices(ref, hyp)
    return _mapping_from_activity(durations, ref_act, hyp_act)


def compute_der(ref, hyp) -> DERBreakdown:
    """Slice-based DER with optimal one-to-one speaker mapping, no collar."""
    ref, hyp = _as_annotation(ref), _as_annotation(hyp)
    durations, ref_act, hyp_act = _slices(ref, hyp)
    if len(durations) == 0:
        return DERBreakdown(0.0, 0.0, 0.0, 0.0, 0.0)
    mapping = _mapping_from_activity(durations, ref_act, hyp_act)
    n_ref = sum(a.astype(int) for a in ref_act.values()) if ref_act else np.zeros(len(durations), int)
    n_hyp = sum(a.astype(int) for a in hyp_act.values()) if hyp_act else np.zeros(len(durations), int)
    correct = np.zeros(len(durations), dtype=int)
    for r, h in mapping.items():
        correct += ref_act[r] & hyp_act[h]
    miss_s = float(np.sum(durations * np.maximum(0, n_ref - n_hyp)))
    fa_s = float(np.sum(durations * np.maximum(0, n_hyp - n_ref)))
    conf_s = float(np.sum(durations * (np.minimum(n_ref, n_hyp) - correct)))
    total = float(np.sum(durations * n_ref))
    return breakdown_from_seconds(miss_s, fa_s, conf_s, total)


def breakdown_from_seconds(miss_s: float, fa_s: float, conf_s: float, ref_speech_s: float) -> DERBreakdown:
    if ref_speech_s > 0:
        pct = 100.0 / ref_speech_s
        miss, fa, conf = miss_s * pct, fa_s * pct, conf_s * pct
    else:
        miss = conf = 0.0
        fa = float("inf") if fa_s > 0 else 0.0
    return DERBreakdown(miss, fa, conf, miss + fa + conf, ref_speech_s, miss_s, fa_s, conf_s)


def aggregate(breakdowns) -> DERBreakdown:
    """Corpus-level DER: error seconds and reference speech summed over files."""
    miss = sum(b.miss_s for b in breakdowns)
    fa = sum(b.fa_s for b in breakdowns)
    conf = sum(b.conf_s for b in breakdowns)
    return breakdown_from_seconds(miss, fa, conf, sum(b.ref_speech_s for b in breakdowns))


def merge_timeline(intervals) -> list[tuple[float, float]]:
    """Union of ``(onset, offset)`` intervals as a sorted disjoint list."""
    spans = sorted((float(a), float(b)) for a, b in intervals if b > a)
    out: list[list[float]] = []
    for on, off in spans:
        if out and on <= out[-1][1]:
            out[-1][1] = max(out[-1][1], off)
        else:
            out.append([on, off])
    return [(a, b) for a, b in out]


def timeline_duration(intervals) -> float:
    return sum(b - a for a, b in merge_timeline(intervals))


def intersect_timelines(a, b) -> list[tuple[float, float]]:
    a, b = merge_timeline(a), merge_timeline(b)
    out, i, j = [], 0, 0
    while i < len(a) and j < len(b):
        lo, hi = max(a[i][0], b[j][0]), min(a[i][1], b[j][1])
        if hi > lo:
            out.append((lo, hi))
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return out


def detection_errors(ref_timeline, hyp_timeline) -> DetectionErrors:
    """Miss and false-alarm time as percentages of reference positive time."""
    ref_total = timeline_duration(ref_timeline)
    if ref_total <= 0:
        raise ZeroDivisionError("reference timeline has zero duration")
    both = timeline_duration(intersect_timelines(ref_timeline, hyp_timeline))
    hyp_total = timeline_duration(hyp_timeline)
    return DetectionErrors(100.0 * (ref_total - both) / ref_total, 100.0 * (hyp_total - both) / ref_total)


def speech_timeline(annotation) -> list[tuple[float, float]]:
    """Times where at least one speaker is active."""
    return merge_timeline((on, off) for on, off, _ in _as_annotation(annotation))


def overlap_timeline(annotation) -> list[tuple[float, float]]:
    """Times where two or more speakers are active."""
    events = []
    for on, off, _ in _as_annotation(annotation):
        events += [(on, 1), (off, -1)]
    events.sort()
    out, count, start = [], 0, None
    for t, step in events:
        count += step
        if count >= 2 and start is None:
            start = t
        elif count < 2 and start is not None:
            if t > start:
                out.append((start, t))
            start = None
    return merge_timeline(out)
