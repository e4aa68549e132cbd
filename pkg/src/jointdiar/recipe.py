"""End-to-end training and extraction recipe shared by the CLI and tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .archive import ExtractionArchive
from .features import FeatureMatrix, compute_log_mel
from .model import FRAME, SEGMENT, EncoderConfig, JointModel, convert_per_segment_to_per_frame
from .plda import PLDAModel, length_normalise, train_plda
from .trainer import (
    TrainConfig,
    TrainingLog,
    finetune_vad_osd,
    plda_training_embeddings,
    set_input_normalisation,
    train_stage1,
    train_stage2,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RecipeConfig:
    plda_per_utterance: int = 4
    plda_iters: int = 20
    length_norm: bool = True
    init_from_segment: bool = False


@dataclass
class TrainedSystem:
    model: JointModel
    plda: PLDAModel
    log: TrainingLog = field(default_factory=TrainingLog)


def train_system(utterances, diarized, encoder: EncoderConfig = EncoderConfig(),
                 train: TrainConfig = TrainConfig(), recipe: RecipeConfig = RecipeConfig(),
                 finetune=None) -> TrainedSystem:
    """Stage 1 (AAM), stage 2 (AAM + VAD + OSD), optional VAD/OSD fine-tuning,
    then PLDA on (by default length-normalised) embeddings from the final model.

    With ``init_from_segment`` stage 1 trains a pooled per-segment model that
    is converted to per-frame mode before stage 2.
    """
    num_classes = len({u.speaker_id for u in utterances})
    encoder = replace(encoder, num_classes=num_classes)
    history = TrainingLog()
    model = JointModel(encoder, SEGMENT if recipe.init_from_segment else FRAME)
    set_input_normalisation(model, [u.features for u in utterances] + [r.features for r in diarized])
    log.info("stage 1: %d utterances, %d speakers", len(utterances), num_classes)
    train_stage1(model, utterances, train, history)
    if model.mode == SEGMENT:
        model = convert_per_segment_to_per_frame(model)
    log.info("stage 2: %d diarized recordings", len(diarized))
    train_stage2(model, utterances, diarized, train, history)
    if finetune:
        finetune_vad_osd(model, utterances, finetune, train, history)
    x, y = plda_training_embeddings(model, utterances, recipe.plda_per_utterance, train.seed)
    if recipe.length_norm:
        x = length_normalise(x)
    plda = train_plda(x, y, max_iters=recipe.plda_iters)
    return TrainedSystem(model, plda, history)


def extract(model: JointModel, audio) -> ExtractionArchive:
    """Single forward pass over a recording (audio buffer or features)."""
    feats = audio if isinstance(audio, FeatureMatrix) else compute_log_mel(audio)
    return ExtractionArchive.from_output(model.forward_per_frame(feats))

