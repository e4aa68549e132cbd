"""Frame labels, dual-corpus batching and the two-stage training schedule.

Stage 1 trains encoder, projection and classifier with the angular-margin
loss on speaker-labelled utterances (every output frame carries the
utterance's speaker). Stage 2 pairs one speaker batch with one diarised
batch per step and optimises the weighted sum of AAM, VAD and OSD losses.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericalError, ParameterSet, Tape, Tensor, add, matmul
from .features import FeatureMatrix, compute_log_mel, read_wav
from .losses import AAMConfig, LossWeights, aam_softmax_loss, bce_with_logits, combined_loss
from .model import FRAME, JointModel
from .rttm import group_by_file, read_rttm_file

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "l_aam", "l_vad", "l_osd", "total")


class TrainingDiverged(NumericalError):
    pass


@dataclass
class SpeakerUtterance:
    features: FeatureMatrix
    speaker_id: int


@dataclass
class DiarizedRecording:
    features: FeatureMatrix
    segments: list  # (onset_s, offset_s, label)
    name: str = ""


@dataclass
class FrameLabels:
    vad: np.ndarray
    osd: np.ndarray

    def __len__(self):
        return len(self.vad)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    speaker_batch: int = 16
    diarized_batch: int = 8
    stage1_epochs: int = 10
    stage2_epochs: int = 30
    finetune_epochs: int = 1
    steps_per_epoch: int = 0  # 0: one pass over the speaker utterances
    chunk_frames: int = 592
    grad_clip: float = 5.0
    head_lr_scale: float = 0.01  # heads see unnormalised embeddings with norms ~1e2
    final_lr_scale: float = 0.0  # cosine decay within each stage down to this fraction
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    aam: AAMConfig = field(default_factory=AAMConfig)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.head_lr_scale < 0:
            raise ValueError("head_lr_scale must be non-negative")
        if not 0 <= self.final_lr_scale <= 1:
            raise ValueError("final_lr_scale must lie in [0, 1]")
        if self.chunk_frames < 8 or self.chunk_frames % 8:
            raise ValueError("chunk_frames must be a positive multiple of 8")


# -- labels -----------------------------------------------------------------


def derive_frame_labels(segments, num_frames: int, period_ms: float = 80.0,
                        origin_offset_ms: float = 40.0) -> FrameLabels:
    """Speaker activity at each output-frame centre ``origin + i*period``.

    A segment ``(on, off)`` is active at ``t`` when ``on <= t < off``;
    vad needs one active speaker, osd two distinct ones.
    """
    if num_frames < 0:
        raise ValueError("num_frames must be non-negative")
    t = (origin_offset_ms + period_ms * np.arange(num_frames)) / 1000.0
    per_speaker: dict[str, np.ndarray] = {}
    for on, off, label in segments:
        lo, hi = np.searchsorted(t, [on, off], side="left")
        if hi > lo:
            active = per_speaker.setdefault(str(label), np.zeros(num_frames, dtype=bool))
            active[lo:hi] = True
    count = np.zeros(num_frames, dtype=np.int64)
    for active in per_speaker.values():
        count += active
    return FrameLabels((count >= 1).astype(np.int8), (count >= 2).astype(np.int8))


def recording_labels(rec: DiarizedRecording, period_ms: float = 80.0) -> FrameLabels:
    n = rec.features.num_frames // 8
    return derive_frame_labels(rec.segments, n, period_ms, rec.features.audio_start_ms + period_ms / 2)


# -- data loading -------------------------------------------------------------


def _read_manifest(path) -> list[tuple[str, str]]:
    rows = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{line_no}: expected two tab-separated fields")
            rows.append((parts[0], parts[1]))
    return rows


def load_speaker_manifest(path) -> tuple[list[SpeakerUtterance], list[str]]:
    """``wav<TAB>speaker_id`` lines; speaker ids are mapped to sorted class indices."""
    rows = _read_manifest(path)
    names = sorted({spk for _, spk in rows})
    index = {n: i for i, n in enumerate(names)}
    utts = [SpeakerUtterance(compute_log_mel(read_wav(wav)), index[spk]) for wav, spk in rows]
    return utts, names


def load_diarized_manifest(path) -> list[DiarizedRecording]:
    """``wav<TAB>rttm`` lines."""
    out = []
    for wav, rttm in _read_manifest(path):
        groups = group_by_file(read_rttm_file(rttm))
        segments = [s for segs in groups.values() for s in segs]
        name = os.path.splitext(os.path.basename(wav))[0]
        out.append(DiarizedRecording(compute_log_mel(read_wav(wav)), segments, name))
    return out


def feature_statistics(feature_sets) -> tuple[np.ndarray, np.ndarray]:
    """Global per-dimension mean and std over all frames."""
    total, sq, n = 0.0, 0.0, 0
    for f in feature_sets:
        v = f.values
        total = total + v.sum(axis=0)
        sq = sq + (v * v).sum(axis=0)
        n += len(v)
    mean = total / n
    std = np.sqrt(np.maximum(sq / n - mean * mean, 1e-8))
    return mean, std


# -- batching -----------------------------------------------------------------


def _crop_start(rng, total_frames: int, chunk: int) -> int:
    slots = (total_frames - chunk) // 8
    return 8 * int(rng.integers(0, slots + 1))


def _chunk_len(cfg: TrainConfig, feats) -> int:
    shortest = min(f.num_frames for f in feats)
    n = min(cfg.chunk_frames, shortest - shortest % 8)
    if n < 8:
        raise ValueError("training material shorter than one output frame")
    return n


def _speaker_batch(rng, utts, order, chunk):
    values, labels = [], []
    per_chunk = chunk // 8
    for idx in order:
        u = utts[idx]
        s = _crop_start(rng, u.features.num_frames, chunk)
        values.append(u.features.values[s : s + chunk])
        labels.append(np.full(per_chunk, u.speaker_id))
    return values, (np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64))


def _diarized_batch(rng, recs, labels, count, chunk):
    values, vad, osd = [], [], []
    per_chunk = chunk // 8
    for _ in range(count):
        r = int(rng.integers(len(recs)))
        s = _crop_start(rng, recs[r].features.num_frames, chunk)
        values.append(recs[r].features.values[s : s + chunk])
        vad.append(labels[r].vad[s // 8 : s // 8 + per_chunk])
        osd.append(labels[r].osd[s // 8 : s // 8 + per_chunk])
    if not values:
        return [], np.zeros(0), np.zeros(0)
    return values, np.concatenate(vad).astype(float), np.concatenate(osd).astype(float)


# -- optimisation ---------------------------------------------------------------


class SGD:
    """Momentum SGD over a named subset of parameters, with global-norm
    clipping. ``lr_scale`` multiplies the gradient of selected parameters
    before clipping, i.e. gives them their own learning rate."""

    def __init__(self, params: ParameterSet, names, lr: float, momentum: float, clip: float = 0.0,
                 lr_scale: dict | None = None):
        self.params = params
        self.names = list(names)
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.scale = {n: (lr_scale or {}).get(n, 1.0) for n in self.names}
        self.velocity = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self) -> None:
        grads = [self.params[n].grad * self.scale[n] if self.scale[n] != 1.0 else self.params[n].grad
                 for n in self.names]
        factor = 1.0
        if self.clip > 0:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.clip:
                factor = self.clip / norm
        for n, g in zip(self.names, grads):
            v = self.velocity[n]
            v *= self.momentum
            v += factor * g
            self.params[n].data -= self.lr * v


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def add(self, epoch, step, l_aam, l_vad, l_osd, total) -> None:
        self.rows.append(dict(zip(LOG_FIELDS, (epoch, step, l_aam, l_vad, l_osd, total))))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


def _step_losses(model: JointModel, sp_values, sp_labels, d_values, vad_y, osd_y, cfg: TrainConfig, use_heads: bool):
    """Build the step's loss on the current tape; returns (total, parts)."""
    zero = Tensor(np.asarray(0.0))
    l_aam = l_vad = l_osd = zero
    if sp_values:
        hidden = model.encode(sp_values)
        if model.mode == FRAME:
            emb = add(matmul(hidden, model.params["proj.w"]), model.params["proj.b"])
        else:
            emb = model.pooled_embedding(hidden, groups=len(sp_values))
            sp_labels = sp_labels[:: len(sp_labels) // len(sp_values)]
        l_aam = aam_softmax_loss(emb, sp_labels, model.params["cls.w"], cfg.aam)
    if use_heads and d_values:
        _, vad_logit, osd_logit = model.frame_heads(model.encode(d_values))
        l_vad = bce_with_logits(vad_logit, vad_y[:, None])
        l_osd = bce_with_logits(osd_logit, osd_y[:, None], mask=vad_y[:, None])
    w = cfg.weights if use_heads else LossWeights(cfg.weights.w_aam, 0.0, 0.0)
    total = combined_loss(l_aam, l_vad, l_osd, w)
    return total, (float(l_aam.data), float(l_vad.data), float(l_osd.data))


def _decay(progress: float, final: float) -> float:
    return final + (1.0 - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


def _run(model: JointModel, utts, recs, cfg: TrainConfig, epochs: int, use_heads: bool,
         trainable, log_: TrainingLog, seed_tag: int) -> JointModel:
    if not utts and cfg.weights.w_aam > 0:
        raise ValueError("speaker corpus is empty")
    if len({u.speaker_id for u in utts}) < 2 and cfg.weights.w_aam > 0:
        raise ValueError("need at least two training speakers")
    rng = np.random.default_rng([cfg.seed, seed_tag])
    chunk = _chunk_len(cfg, [u.features for u in utts] + ([r.features for r in recs] if use_heads else []))
    labels = [recording_labels(r) for r in recs] if use_heads else []
    opt = SGD(model.params, trainable, cfg.learning_rate, cfg.momentum, cfg.grad_clip,
              {n: cfg.head_lr_scale for n in model.head_names})
    n_batches = max(1, math.ceil(len(utts) / max(cfg.speaker_batch, 1)))
    steps = cfg.steps_per_epoch or n_batches
    total_steps = max(1, epochs * steps)
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(utts))
        sums = np.zeros(4)
        for k in range(steps):
            b = k % n_batches
            if b == 0 and k > 0:
                order = rng.permutation(len(utts))
            idx = order[b * cfg.speaker_batch : (b + 1) * cfg.speaker_batch] if cfg.speaker_batch else []
            sp_values, sp_labels = _speaker_batch(rng, utts, idx, chunk)
            d_values, vad_y, osd_y = (_diarized_batch(rng, recs, labels, cfg.diarized_batch, chunk)
                                      if use_heads else ([], None, None))
            model.params.zero_grad()
            try:
                with Tape() as tape:
                    total, parts = _step_losses(model, sp_values, sp_labels, d_values, vad_y, osd_y, cfg, use_heads)
                value = float(total.data)
            except NumericalError as exc:
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step + 1}: {exc}") from exc
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step + 1}: "
                                       f"aam={parts[0]} vad={parts[1]} osd={parts[2]}")
            tape.backward(total)
            opt.lr = cfg.learning_rate * _decay(step / total_steps, cfg.final_lr_scale)
            opt.step()
            step += 1
            sums += (*parts, value)
        mean = sums / steps
        log_.add(epoch, step, *map(float, mean))
        log.info("epoch %d: aam=%.4f vad=%.4f osd=%.4f total=%.4f", epoch, *mean)
    return model


def train_stage1(model: JointModel, utterances, cfg: TrainConfig = TrainConfig(),
                 log_: TrainingLog | None = None) -> JointModel:
    """AAM-only training of encoder, projection and classifier (heads untouched)."""
    log_ = TrainingLog() if log_ is None else log_
    names = model.encoder_names + model.projection_names + ["cls.w"]
    return _run(model, utterances, [], cfg, cfg.stage1_epochs, False, names, log_, 1)


def train_stage2(model: JointModel, utterances, diarized, cfg: TrainConfig = TrainConfig(),
                 log_: TrainingLog | None = None, epochs: int | None = None, seed_tag: int = 2) -> JointModel:
    """Paired speaker + diarised batches in one weighted loss; all parameters train."""
    if model.mode != FRAME:
        raise ValueError("stage 2 needs a per-frame model")
    log_ = TrainingLog() if log_ is None else log_
    epochs = cfg.stage2_epochs if epochs is None else epochs
    return _run(model, utterances, diarized, cfg, epochs, True, list(model.params), log_, seed_tag)


def finetune_vad_osd(model: JointModel, utterances, target_diarized, cfg: TrainConfig = TrainConfig(),
                     log_: TrainingLog | None = None) -> JointModel:
    """Stage-2 style training with the target corpus supplying VAD/OSD batches."""
    return train_stage2(model, utterances, target_diarized, cfg, log_, cfg.finetune_epochs, seed_tag=3)


def set_input_normalisation(model: JointModel, feature_sets) -> JointModel:
    model.norm_mean, model.norm_std = feature_statistics(feature_sets)
    return model


# -- evaluation helpers -----------------------------------------------------------


def frame_embeddings(model: JointModel, features: FeatureMatrix) -> np.ndarray:
    hidden = model.encode(features.values)
    return add(matmul(hidden, model.params["proj.w"]), model.params["proj.b"]).data


def classification_accuracy(model: JointModel, utterances) -> float:
    """Fraction of per-frame embeddings whose nearest classifier row is the
    utterance's speaker."""
    hits = total = 0
    for u in utterances:
        pred = model.classify(frame_embeddings(model, u.features)).argmax(axis=1)
        hits += int(np.sum(pred == u.speaker_id))
        total += len(pred)
    return hits / max(total, 1)


def vad_accuracy(model: JointModel, recordings, threshold: float = 0.5) -> float:
    hits = total = 0
    for r in recordings:
        out = model.forward_per_frame(r.features)
        y = recording_labels(r).vad
        hits += int(np.sum((out.vad_prob >= threshold) == (y == 1)))
        total += len(y)
    return hits / max(total, 1)


def plda_training_embeddings(model: JointModel, utterances, per_utterance: int = 4, seed: int = 0):
    """Randomly chosen per-frame embeddings from each utterance, with speaker labels."""
    rng = np.random.default_rng([seed, 0x9DA])
    embs, labels = [], []
    for u in utterances:
        e = frame_embeddings(model, u.features)
        pick = rng.choice(len(e), size=min(per_utterance, len(e)), replace=False)
        embs.append(e[np.sort(pick)])
        labels += [u.speaker_id] * len(pick)
    return np.concatenate(embs), np.asarray(labels)
