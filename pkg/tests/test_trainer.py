import numpy as np
import pytest
from hypothesis import given, strategies as st

from jointdiar.features import compute_log_mel
from jointdiar.losses import LossWeights
from jointdiar.model import FRAME, SEGMENT, EncoderConfig, JointModel
from jointdiar.synthetic import ConversationConfig, generate_conversation, render_utterance, sample_speaker, write_wav
from jointdiar.trainer import (
    DiarizedRecording,
    SpeakerUtterance,
    TrainConfig,
    TrainingDiverged,
    TrainingLog,
    classification_accuracy,
    derive_frame_labels,
    finetune_vad_osd,
    load_diarized_manifest,
    load_speaker_manifest,
    set_input_normalisation,
    train_stage1,
    train_stage2,
    vad_accuracy,
)
from oracles import frame_labels_oracle

TOY = EncoderConfig(context_frames=4, hidden_dims=(48, 48), embed_dim=32, num_classes=4)


def _snapshot(model):
    return {k: model.params[k].data.copy() for k in model.params}


def _same(a, b, names=None):
    return all(np.array_equal(a[k], b[k]) for k in (names or a))


@pytest.fixture(scope="module")
def corpus():
    speakers = [sample_speaker(500 + i) for i in range(4)]
    utts = [SpeakerUtterance(compute_log_mel(render_utterance(s, 2.0, rng_seed=u)), i)
            for i, s in enumerate(speakers) for u in range(6)]
    held = [SpeakerUtterance(compute_log_mel(render_utterance(s, 2.0, rng_seed=100 + u)), i)
            for i, s in enumerate(speakers) for u in range(2)]
    recs = []
    for c in range(4):
        pool = [sample_speaker(900 + 3 * c + k) for k in range(3)]
        audio, segs = generate_conversation(pool, ConversationConfig(num_speakers=3, total_duration_s=30, seed=c))
        recs.append(DiarizedRecording(compute_log_mel(audio), segs, f"c{c}"))
    return utts, held, recs


def _model(utts, recs, mode=FRAME):
    m = JointModel(TOY, mode)
    return set_input_normalisation(m, [u.features for u in utts] + [r.features for r in recs])


def _cfg(**kw):
    base = dict(learning_rate=0.05, speaker_batch=8, diarized_batch=4, stage1_epochs=1, stage2_epochs=1,
                chunk_frames=96, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# -- labels ----------------------------------------------------------------------


def test_label_examples():
    segs = [(0.0, 2.0, "A"), (1.0, 3.0, "B")]
    lab = derive_frame_labels(segs, 44, 80, 40)
    i_148, i_052, i_350 = (1480 - 40) // 80, (520 - 40) // 80, (3500 - 40) // 80
    assert (lab.vad[i_148], lab.osd[i_148]) == (1, 1)
    assert (lab.vad[i_052], lab.osd[i_052]) == (1, 0)
    assert (lab.vad[i_350], lab.osd[i_350]) == (0, 0)


def test_same_speaker_overlap_is_not_overlap():
    lab = derive_frame_labels([(0.0, 2.0, "A"), (1.0, 3.0, "A")], 10)
    assert lab.osd.sum() == 0 and lab.vad.sum() == 10


segment_sets = st.lists(
    st.tuples(st.integers(0, 6000), st.integers(1, 3000), st.sampled_from("abcd")).map(
        lambda t: (t[0] / 1000, (t[0] + t[1]) / 1000, t[2])),
    max_size=8,
)


@given(segment_sets, st.integers(0, 120))
def test_labels_match_raster_oracle(segs, n):
    lab = derive_frame_labels(segs, n, 80, 40)
    vad, osd = frame_labels_oracle(segs, n, 80, 40)
    assert np.array_equal(lab.vad, vad) and np.array_equal(lab.osd, osd)
    assert np.all(lab.vad[lab.osd == 1] == 1)


def test_negative_frame_count():
    with pytest.raises(ValueError):
        derive_frame_labels([], -1)


# -- manifests -------------------------------------------------------------------


def test_manifest_loading(tmp_path):
    from jointdiar.rttm import RttmRecord, write_rttm_file

    wav = tmp_path / "u.wav"
    write_wav(wav, render_utterance(sample_speaker(1), 1.0, rng_seed=0))
    (tmp_path / "spk.tsv").write_text(f"{wav}\tzed\n{wav}\talpha\n\n")
    utts, names = load_speaker_manifest(tmp_path / "spk.tsv")
    assert names == ["alpha", "zed"] and [u.speaker_id for u in utts] == [1, 0]
    rttm = tmp_path / "u.rttm"
    write_rttm_file(rttm, [RttmRecord("u", 0.1, 0.5, "a")])
    (tmp_path / "dia.tsv").write_text(f"{wav}\t{rttm}\n")
    (rec,) = load_diarized_manifest(tmp_path / "dia.tsv")
    assert rec.segments == [(0.1, 0.6, "a")] and rec.name == "u"
    (tmp_path / "bad.tsv").write_text(f"{wav}\n")
    with pytest.raises(ValueError, match="bad.tsv:1"):
        load_speaker_manifest(tmp_path / "bad.tsv")


# -- training --------------------------------------------------------------------


def test_stage1_reduces_aam_loss_and_leaves_heads(corpus):
    utts, held, recs = corpus
    m = _model(utts, recs)
    before = _snapshot(m)
    log = TrainingLog()
    train_stage1(m, utts, _cfg(stage1_epochs=1, steps_per_epoch=200), log)
    first = TrainingLog()
    train_stage1(_model(utts, recs), utts, _cfg(stage1_epochs=1, steps_per_epoch=10), first)
    assert log.rows[-1]["l_aam"] < first.rows[0]["l_aam"]
    assert _same(before, _snapshot(m), m.head_names)
    assert classification_accuracy(m, held) > 1 / 4


def test_zero_learning_rate_keeps_parameters(corpus):
    utts, _, recs = corpus
    m = _model(utts, recs)
    before = _snapshot(m)
    train_stage2(m, utts, recs, _cfg(learning_rate=0.0, stage2_epochs=2))
    assert _same(before, _snapshot(m))


def test_zero_weights_keep_parameters(corpus):
    utts, _, recs = corpus
    m = _model(utts, recs)
    before = _snapshot(m)
    train_stage2(m, utts, recs, _cfg(weights=LossWeights(0.0, 0.0, 0.0)))
    assert _same(before, _snapshot(m))


def test_empty_diarized_batch_leaves_heads_exactly(corpus):
    utts, _, recs = corpus
    m = _model(utts, recs)
    before = _snapshot(m)
    train_stage2(m, utts, recs, _cfg(diarized_batch=0))
    after = _snapshot(m)
    assert _same(before, after, m.head_names)
    assert not _same(before, after, m.encoder_names)


def test_training_is_deterministic(corpus):
    utts, _, recs = corpus
    a, b = _model(utts, recs), _model(utts, recs)
    for m in (a, b):
        train_stage1(m, utts, _cfg(steps_per_epoch=5))
        train_stage2(m, utts, recs, _cfg(steps_per_epoch=5))
    assert _same(_snapshot(a), _snapshot(b))


def test_stage2_requires_frame_model(corpus):
    utts, _, recs = corpus
    with pytest.raises(ValueError):
        train_stage2(_model(utts, recs, SEGMENT), utts, recs, _cfg())


def test_divergence_is_reported(corpus):
    utts, _, recs = corpus
    m = _model(utts, recs)
    m.params["proj.w"].data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 1 step 1"):
        train_stage1(m, utts, _cfg())


def test_zero_epoch_finetune_is_identity_and_log_format(corpus):
    utts, _, recs = corpus
    m = _model(utts, recs)
    before = _snapshot(m)
    finetune_vad_osd(m, utts, recs, _cfg(finetune_epochs=0))
    assert _same(before, _snapshot(m))
    log = TrainingLog()
    finetune_vad_osd(m, utts, recs, _cfg(finetune_epochs=2, steps_per_epoch=2), log)
    text = log.to_csv().splitlines()
    assert text[0] == "epoch,step,l_aam,l_vad,l_osd,total"
    assert [r["epoch"] for r in log.rows] == [1, 2] and all(r["l_vad"] > 0 for r in log.rows)


@pytest.mark.slow
def test_stage2_learns_vad_and_aam_term_matters(corpus):
    utts, held, recs = corpus
    train, test = recs[:3], recs[3:]
    results = {}
    for w_aam in (1.0, 0.0):
        m = _model(utts, recs)
        train_stage1(m, utts, _cfg(stage1_epochs=4, steps_per_epoch=30))
        cfg = _cfg(stage2_epochs=4, steps_per_epoch=30, weights=LossWeights(w_aam, 5.0, 2.0))
        train_stage2(m, utts, train, cfg)
        results[w_aam] = (vad_accuracy(m, test), classification_accuracy(m, held))
    assert results[1.0][0] > 0.9
    assert results[1.0][1] > results[0.0][1]


@pytest.mark.slow
def test_finetune_helps_on_shifted_domain(corpus):
    utts, _, recs = corpus
    shifted = []
    for c in range(3):
        pool = [sample_speaker(950 + 3 * c + k) for k in range(3)]
        cfg = ConversationConfig(num_speakers=3, total_duration_s=30, seed=50 + c, noise_level=0.03)
        audio, segs = generate_conversation(pool, cfg)
        shifted.append(DiarizedRecording(compute_log_mel(audio), segs))
    m = _model(utts, recs)
    train_stage1(m, utts, _cfg(stage1_epochs=2, steps_per_epoch=30))
    train_stage2(m, utts, recs, _cfg(stage2_epochs=2, steps_per_epoch=30))
    before = vad_accuracy(m, shifted[2:])
    finetune_vad_osd(m, utts, shifted[:2], _cfg(finetune_epochs=2, steps_per_epoch=30))
    assert vad_accuracy(m, shifted[2:]) > before
