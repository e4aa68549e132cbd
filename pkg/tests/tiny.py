"""A small end-to-end CLI configuration shared by the CLI and acceptance tests."""

import os

from jointdiar.cli import main

TINY_CONFIG = """\
# seconds-scale corpus and model
corpus.num_train_speakers = 6
corpus.utterances_per_speaker = 3
corpus.utterance_s = 3.0
corpus.num_diar_speakers = 6
corpus.num_diar_conversations = 3
corpus.diar_conversation_s = 20
corpus.num_eval_speakers = 4
corpus.num_eval_conversations = 2
corpus.eval_conversation_s = 20
model.context_frames = 2
model.hidden_dims = 32, 32
model.embed_dim = 16
train.stage1_epochs = 2
train.stage2_epochs = 2
train.speaker_batch = 6
train.diarized_batch = 2
train.chunk_frames = 96
recipe.plda_per_utterance = 2
vbx.latent_dim = 8
"""


def read_manifest(path):
    with open(path) as fh:
        return [line.rstrip("\n").split("\t") for line in fh if line.strip()]


def run_chain(root, seed=3):
    """simulate, train, extract, diarize under ``root``; returns the RTTM bytes
    keyed by file name."""
    root = os.fspath(root)
    os.makedirs(root, exist_ok=True)
    cfg = os.path.join(root, "tiny.cfg")
    with open(cfg, "w") as fh:
        fh.write(TINY_CONFIG)
    base = ["--config", cfg, "--seed", str(seed)]
    corpus = os.path.join(root, "corpus")
    assert main(base + ["simulate", "--out", corpus]) == 0
    model, plda = os.path.join(root, "m.jdmx"), os.path.join(root, "p.plda")
    assert main(base + ["train", "--speakers", os.path.join(corpus, "speakers.tsv"),
                        "--diarized", os.path.join(corpus, "diarized.tsv"),
                        "--model", model, "--plda", plda, "--log", os.path.join(root, "log.csv")]) == 0
    arch = os.path.join(root, "arch")
    assert main(base + ["extract", "--manifest", os.path.join(corpus, "eval.tsv"),
                        "--model", model, "--out-dir", arch]) == 0
    archives = sorted(os.path.join(arch, f) for f in os.listdir(arch))
    out = os.path.join(root, "rttm")
    assert main(base + ["diarize", *archives, "--plda", plda, "--out-dir", out]) == 0
    result = {}
    for name in sorted(os.listdir(out)):
        with open(os.path.join(out, name), "rb") as fh:
            result[name] = fh.read()
    return result
