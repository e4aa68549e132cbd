"""Diarization from per-frame outputs: VAD binarisation, clustering of speech
frames, interval assembly and second-speaker assignment in overlaps. Also the
single-pass vs. sliding-window extraction benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .archive import ExtractionArchive
from .features import FeatureMatrix
from .metrics import Annotation, intersect_timelines, merge_timeline
from .model import FRAME, SEGMENT, JointModel
from .plda import PLDAModel
from .trainer import derive_frame_labels
from .vbx import VBxConfig, cluster_embeddings


@dataclass(frozen=True)
class BinarizeConfig:
    vad_threshold: float = 0.5
    osd_threshold: float = 0.6
    min_speech_s: float = 0.2
    min_silence_s: float = 0.1
    min_overlap_s: float = 0.1

    def __post_init__(self):
        for t in (self.vad_threshold, self.osd_threshold):
            if not 0 < t < 1:
                raise ValueError("thresholds must lie in (0, 1)")
        if min(self.min_speech_s, self.min_silence_s, self.min_overlap_s) < 0:
            raise ValueError("durations must be non-negative")


def binarize_probs(probs, timestamps, threshold: float, min_positive_s: float, min_gap_s: float,
                   half_width_s: float = 0.04) -> list[tuple[float, float]]:
    """Threshold (``p >= threshold``), fill gaps shorter than ``min_gap_s``,
    then drop intervals shorter than ``min_positive_s``. Each positive frame
    spans its centre +- ``half_width_s``."""
    probs = np.asarray(probs, dtype=np.float64)
    ts = np.asarray(timestamps, dtype=np.float64)
    pos = probs >= threshold
    runs = []
    i, n = 0, len(pos)
    while i < n:
        if pos[i]:
            j = i
            while j + 1 < n and pos[j + 1]:
                j += 1
            runs.append([ts[i] - half_width_s, ts[j] + half_width_s])
            i = j + 1
        else:
            i += 1
    filled: list[list[float]] = []
    for on, off in runs:
        if filled and on - filled[-1][1] < min_gap_s - 1e-9:
            filled[-1][1] = off
        else:
            filled.append([on, off])
    return [(round(on, 6), round(off, 6)) for on, off in filled if off - on >= min_positive_s - 1e-9]


def frames_in_timeline(timestamps, timeline) -> np.ndarray:
    """Boolean mask of frame centres that fall inside ``timeline``."""
    ts = np.asarray(timestamps, dtype=np.float64)
    mask = np.zeros(len(ts), dtype=bool)
    for on, off in timeline:
        mask |= (ts >= on) & (ts < off)
    return mask


def speaker_name(index: int) -> str:
    return f"spk{index:02d}"


def frames_to_intervals(frame_index, labels, timestamps, half_width_s: float = 0.04):
    """Merge runs of consecutive frames with the same label into intervals."""
    out = []
    start = None
    for k, (idx, lab) in enumerate(zip(frame_index, labels)):
        if start is None:
            start = k
        last = k + 1 == len(frame_index)
        if last or frame_index[k + 1] != idx + 1 or labels[k + 1] != lab:
            on = timestamps[frame_index[start]] - half_width_s
            off = timestamps[idx] + half_width_s
            out.append((round(float(on), 6), round(float(off), 6), speaker_name(int(lab))))
            start = None
    return out


def _coverage(intervals, on, off) -> float:
    return sum(max(0.0, min(b, off) - max(a, on)) for a, b in intervals)


def assign_second_speakers(diar, overlap_timeline, max_speakers_per_frame: int = 2) -> Annotation:
    """Add the speaker closest in time as a second speaker to every overlap
    interval. Distance is the gap between interval edges (0 when touching);
    ties go to the earlier nearest-interval onset, then the smaller label."""
    diar = diar if isinstance(diar, Annotation) else Annotation(diar)
    if max_speakers_per_frame < 2:
        return diar
    by_speaker: dict[str, list] = {}
    for on, off, lab in diar:
        by_speaker.setdefault(lab, []).append((on, off))
    added = []
    for o_on, o_off in merge_timeline(overlap_timeline):
        cover = {lab: _coverage(iv, o_on, o_off) for lab, iv in by_speaker.items()}
        if not cover or max(cover.values()) <= 0:
            continue
        primary = min(cover, key=lambda lab: (-cover[lab], lab))
        best = None
        for lab, iv in by_speaker.items():
            if lab == primary:
                continue
            dist, onset = min((max(0.0, a - o_off, o_on - b), a) for a, b in iv)
            key = (dist, onset, lab)
            if best is None or key < best:
                best = key
        if best is not None:
            added.append((o_on, o_off, best[2]))
    return Annotation(list(diar) + added)


def _carry_into_overlaps(labels, single) -> np.ndarray:
    """Label each run of overlap frames with the speaker of the clustered
    frame just before it (just after, for a run at the start), so that the
    whole overlap interval has one primary speaker."""
    out = np.array(labels, copy=True)
    n = len(out)
    i = 0
    while i < n:
        if single[i]:
            i += 1
            continue
        j = i
        while j < n and not single[j]:
            j += 1
        if i > 0:
            out[i:j] = out[i - 1]
        elif j < n:
            out[i:j] = out[j]
        i = j
    return out


def run_diarization(archive: ExtractionArchive, plda: PLDAModel, vbx: VBxConfig = VBxConfig(),
                    bin_cfg: BinarizeConfig = BinarizeConfig(), overlap: bool = True) -> Annotation:
    """Speech detection, one clustering call over all speech-frame
    embeddings, interval assembly and (optionally) overlap handling.

    Frames inside the detected overlap timeline are not clustered; each
    overlap run takes the speaker of the clustered frame preceding it."""
    if archive.dim != plda.dim:
        raise ValueError(f"archive embeddings are {archive.dim}-dim, PLDA expects {plda.dim}")
    ts = archive.timestamps
    half = archive.period_ms / 2000.0
    speech = binarize_probs(archive.vad_prob, ts, bin_cfg.vad_threshold, bin_cfg.min_speech_s,
                            bin_cfg.min_silence_s, half)
    idx = np.flatnonzero(frames_in_timeline(ts, speech))
    if len(idx) == 0:
        return Annotation()
    osd = intersect_timelines(binarize_probs(archive.osd_prob, ts, bin_cfg.osd_threshold, bin_cfg.min_overlap_s,
                                             bin_cfg.min_silence_s, half), speech)
    single = ~frames_in_timeline(ts[idx], osd)
    result = cluster_embeddings(archive.embeddings[idx].astype(np.float64), plda, vbx, cluster_mask=single)
    labels = _carry_into_overlaps(result.hard_labels, single)
    diar = Annotation(frames_to_intervals(idx, labels, ts, half))
    if not overlap:
        return diar
    return assign_second_speakers(diar, osd)


def oracle_archive(archive: ExtractionArchive, reference) -> ExtractionArchive:
    """Copy of ``archive`` whose VAD/OSD probabilities are the 0/1 reference
    labels at the frame centres."""
    ref = reference if isinstance(reference, Annotation) else Annotation(reference)
    labels = derive_frame_labels(list(ref), len(archive), archive.period_ms, archive.offset_ms)
    return ExtractionArchive(archive.embeddings, labels.vad, labels.osd, archive.period_ms, archive.offset_ms)


# -- extraction benchmark ----------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkReport:
    per_segment_windows: int
    per_frame_passes: int
    per_segment_s: float
    per_frame_s: float

    @property
    def speedup(self) -> float:
        return self.per_segment_s / self.per_frame_s if self.per_frame_s > 0 else float("inf")


def sliding_windows(speech, window_s: float = 1.5, step_s: float = 0.25) -> list[tuple[float, float]]:
    """``floor((d - window)/step) + 1`` windows per speech region of length
    ``d >= window``; a shorter region is one window covering it."""
    out = []
    for on, off in merge_timeline(speech):
        d = off - on
        if d < window_s:
            out.append((on, off))
            continue
        count = int(np.floor((d - window_s) / step_s + 1e-9)) + 1
        out += [(on + k * step_s, on + k * step_s + window_s) for k in range(count)]
    return out


def segment_counterpart(model: JointModel) -> JointModel:
    """Per-segment model sharing the encoder of a per-frame model."""
    if model.mode != FRAME:
        return model
    seg = JointModel(model.config, SEGMENT, norm_mean=model.norm_mean, norm_std=model.norm_std)
    for name in model.encoder_names:
        seg.params[name] = model.params[name].data
    return seg


def benchmark_extraction(features: FeatureMatrix, model: JointModel, speech=None,
                         window_s: float = 1.5, step_s: float = 0.25) -> BenchmarkReport:
    """Time one per-frame pass over the recording against one per-segment
    encoder pass per sliding window over ``speech`` (default: everything)."""
    duration = features.num_frames * features.frame_shift_ms / 1000.0
    if speech is None:
        speech = [(0.0, duration)]
    seg_model = segment_counterpart(model)
    frame_model = model if model.mode == FRAME else None
    windows = sliding_windows(speech, window_s, step_s)
    seg_model.encoder_calls = 0
    t0 = time.perf_counter()
    min_len = 8 * features.frame_shift_ms / 1000.0 + 1e-6
    for on, off in windows:
        on = min(on, max(0.0, duration - min_len))
        seg_model.forward_per_segment(features, on, max(off, on + min_len))
    per_segment_s = time.perf_counter() - t0
    windows_run = seg_model.encoder_calls
    if frame_model is None:
        frame_model = JointModel(model.config, FRAME, norm_mean=model.norm_mean, norm_std=model.norm_std)
        for name in model.encoder_names:
            frame_model.params[name] = model.params[name].data
    frame_model.encoder_calls = 0
    t0 = time.perf_counter()
    frame_model.forward_per_frame(features)
    per_frame_s = time.perf_counter() - t0
    return BenchmarkReport(windows_run, frame_model.encoder_calls, per_segment_s, per_frame_s)
