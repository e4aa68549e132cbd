"""Synthetic speakers, utterances and multi-speaker conversations.

A speaker is a glottal pulse source (pitch + jitter) shaped by three formant
resonators and a spectral tilt. Utterances are chains of short "syllables"
whose formants and pitch wander around the speaker's values, so the signal
varies over time while keeping a stable identity.

Conversations alternate single-speaker stretches with either pauses or
overlaps (the next speaker starts before the current one stops). Piece
durations are drawn from the configured distributions and then rescaled per
class so the silence / single-speaker / overlap shares match the targets.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .config import ConfigError
from .features import SAMPLE_RATE, AudioBuffer, write_wav

F0_RANGE = (70.0, 300.0)



@dataclass(frozen=True)
class SyntheticSpeaker:
    f0_hz: float
    formants: tuple
    bandwidths: tuple
    tilt: float
    jitter: float
    seed: int

    def vector(self) -> np.ndarray:
        return np.array([self.f0_hz, *self.formants, *self.bandwidths, self.tilt, self.jitter])


def sample_speaker(rng_seed: int) -> SyntheticSpeaker:
    """Draw speaker parameters from fixed ranges; deterministic per seed.

    f0 log-uniform in [80, 260] Hz; F1 in [300, 850]; F2 at least 250 Hz above
    F1 and up to 2400; F3 at least 300 Hz above F2 and up to 3600; tilt in
    [-12, -3] dB/octave; jitter 0.5-3 %.
    """
    rng = np.random.default_rng([int(rng_seed), 0x5EED])
    f0 = float(np.exp(rng.uniform(np.log(80.0), np.log(260.0))))
    f1 = rng.uniform(300.0, 850.0)
    f2 = rng.uniform(max(f1 + 250.0, 900.0), 2400.0)
    f3 = rng.uniform(max(f2 + 300.0, 2200.0), 3600.0)
    bws = (rng.uniform(60.0, 160.0), rng.uniform(80.0, 200.0), rng.uniform(120.0, 250.0))
    return SyntheticSpeaker(
        f0_hz=f0,
        formants=(float(f1), float(f2), float(f3)),
        bandwidths=tuple(float(b) for b in bws),
        tilt=float(rng.uniform(-12.0, -3.0)),
        jitter=float(rng.uniform(0.005, 0.03)),
        seed=int(rng_seed),
    )


def _resonator(freq: float, bw: float):
    r = np.exp(-np.pi * bw / SAMPLE_RATE)
    theta = 2.0 * np.pi * freq / SAMPLE_RATE
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    return np.array([a.sum()]), a  # unit gain at DC


def _tilt_pole(tilt: float) -> float:
    # steeper (more negative) slope -> stronger one-pole low-pass
    return 0.5 + 0.45 * (min(max(-tilt, 3.0), 12.0) - 3.0) / 9.0


def render_utterance(spk: SyntheticSpeaker, duration_s: float, rng_seed: int) -> AudioBuffer:
    """Speech-like signal of ``duration_s`` seconds, peak-normalised to 0.5."""
    if duration_s < 0.2:
        raise ValueError("utterances must last at least 0.2 s")
    n = int(round(duration_s * SAMPLE_RATE))
    rng = np.random.default_rng([spk.seed, int(rng_seed), 0xA0D10])

    # syllable boundaries
    bounds = [0]
    while bounds[-1] < n:
        bounds.append(bounds[-1] + int(rng.uniform(0.12, 0.30) * SAMPLE_RATE))
    bounds[-1] = n
    n_syl = len(bounds) - 1

    # pitch contour: per-syllable targets, linear glides, 5 ms jitter steps
    targets = spk.f0_hz * np.exp(0.06 * rng.standard_normal(n_syl + 1))
    centres = np.array([(bounds[i] + bounds[i + 1]) / 2 for i in range(n_syl)])
    f0 = np.interp(np.arange(n), np.concatenate([[0], centres, [n]]), np.concatenate([[targets[0]], targets[:n_syl], [targets[-1]]]))
    step = SAMPLE_RATE // 200
    jit = 1.0 + spk.jitter * rng.standard_normal(n // step + 1)
    f0 = np.clip(f0 * np.repeat(jit, step)[:n], F0_RANGE[0] * 0.8, F0_RANGE[1] * 1.2)
    phase = np.cumsum(f0) / SAMPLE_RATE + rng.uniform()
    source = np.zeros(n)
    source[1:][np.diff(np.floor(phase)) > 0] = 1.0
    source += 0.02 * rng.standard_normal(n)  # aspiration

    # time-varying formant filtering, state carried across syllables
    out = np.empty(n)
    states = [np.zeros(2) for _ in range(3)]
    tilt_state = np.zeros(1)
    pole = _tilt_pole(spk.tilt)
    for i in range(n_syl):
        lo, hi = bounds[i], bounds[i + 1]
        seg = source[lo:hi]
        seg, tilt_state = lfilter([1.0 - pole], [1.0, -pole], seg, zi=tilt_state)
        for k in range(3):
            freq = spk.formants[k] * (1.0 + 0.07 * rng.standard_normal())
            freq = float(np.clip(freq, 150.0, SAMPLE_RATE / 2 - 500.0))
            b, a = _resonator(freq, spk.bandwidths[k])
            seg, states[k] = lfilter(b, a, seg, zi=states[k])
        u = (np.arange(hi - lo) + 0.5) / (hi - lo)
        out[lo:hi] = seg * (0.35 + 0.65 * np.sqrt(np.sin(np.pi * u)))

    ramp = min(n // 2, int(0.01 * SAMPLE_RATE))
    if ramp:
        fade = np.linspace(0.0, 1.0, ramp, endpoint=False) + 0.5 / ramp
        out[:ramp] *= fade
        out[n - ramp :] *= fade[::-1]
    peak = np.max(np.abs(out))
    return AudioBuffer(out * (0.5 / peak) if peak > 0 else out)


@dataclass(frozen=True)
class ConversationConfig:
    num_speakers: int = 2
    total_duration_s: float = 300.0
    silence_ratio: float = 0.243
    single_ratio: float = 0.550
    overlap_ratio: float = 0.207
    turn_median_s: float = 2.0
    turn_sigma: float = 0.6
    overlap_mean_s: float = 1.2
    noise_level: float = 3e-3
    min_piece_s: float = 0.25
    seed: int = 0

    def __post_init__(self):
        ratios = (self.silence_ratio, self.single_ratio, self.overlap_ratio)
        if min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-6:
            raise ConfigError("silence/single/overlap ratios must be non-negative and sum to 1")
        if self.single_ratio <= 0:
            raise ConfigError("single-speaker ratio must be positive")
        if self.num_speakers < 1:
            raise ConfigError("need at least one speaker")


def _plan_pieces(cfg: ConversationConfig, rng) -> list[tuple[str, float]]:
    """Alternating ('single', d) and ('overlap'|'silence', d) pieces framed by
    silences, rescaled so class totals equal the configured shares."""
    if cfg.overlap_ratio > 0 and cfg.num_speakers < 2:
        raise ConfigError("an overlap target needs at least two speakers")
    mean_single = cfg.turn_median_s * np.exp(cfg.turn_sigma**2 / 2)
    p_overlap = cfg.overlap_ratio / cfg.single_ratio * mean_single / cfg.overlap_mean_s
    if p_overlap > 1.0:
        raise ConfigError("overlap target unreachable: raise overlap_mean_s or turn length")
    if cfg.silence_ratio > 0 and p_overlap >= 1.0:
        raise ConfigError("no room for pauses between turns")
    pause_mean = (
        cfg.silence_ratio / cfg.single_ratio * mean_single / (1.0 - p_overlap) if p_overlap < 1 else 0.0
    )
    cycle = mean_single + p_overlap * cfg.overlap_mean_s + (1 - p_overlap) * pause_mean
    n_turns = max(1, int(round(cfg.total_duration_s / cycle)))

    pieces: list[tuple[str, float]] = [("silence", rng.exponential(pause_mean) if pause_mean else 0.0)]
    for t in range(n_turns):
        pieces.append(("single", rng.lognormal(np.log(cfg.turn_median_s), cfg.turn_sigma)))
        if t < n_turns - 1:
            if rng.uniform() < p_overlap:
                pieces.append(("overlap", rng.exponential(cfg.overlap_mean_s)))
            else:
                pieces.append(("silence", rng.exponential(pause_mean) if pause_mean else 0.0))
    pieces.append(("silence", rng.exponential(pause_mean) if pause_mean else 0.0))

    # keep every piece audible, then rescale each class to its share
    pieces = [(kind, max(d, cfg.min_piece_s) if kind != "silence" or d > 0 else 0.0) for kind, d in pieces]
    shares = {"silence": cfg.silence_ratio, "single": cfg.single_ratio, "overlap": cfg.overlap_ratio}
    totals = {k: sum(d for kind, d in pieces if kind == k) for k in shares}
    factor = {}
    for k, share in shares.items():
        target = share * cfg.total_duration_s
        if totals[k] > 0:
            factor[k] = target / totals[k]
        elif target > 0:
            # no piece of this class was drawn; put it all at the edges
            pieces[0] = ("silence", target / 2)
            pieces[-1] = ("silence", target / 2)
            factor[k] = 1.0
        else:
            factor[k] = 1.0
    return [(kind, d * factor[kind]) for kind, d in pieces]


def speaker_label(index: int) -> str:
    return f"spk{index:02d}"


def generate_conversation(speakers, cfg: ConversationConfig):
    """Render a conversation. Returns ``(AudioBuffer, segments)`` where each
    segment is ``(onset_s, offset_s, label)`` and labels are ``spkNN`` by
    position in ``speakers``."""
    if len(speakers) < 1:
        raise ConfigError("need at least one speaker")
    if len(speakers) != cfg.num_speakers:
        raise ConfigError(f"config expects {cfg.num_speakers} speakers, got {len(speakers)}")
    rng = np.random.default_rng([int(cfg.seed), 0xC0417])
    pieces = _plan_pieces(cfg, rng)

    segments = []
    t = 0.0
    current = int(rng.integers(len(speakers)))
    start = None
    for kind, d in pieces:
        if kind == "single":
            if start is None:
                start = t
            t += d
        elif kind == "overlap":
            nxt = _next_speaker(current, len(speakers), rng)
            segments.append((start, t + d, current))
            start, current = t, nxt
            t += d
        else:
            if start is not None:
                segments.append((start, t, current))
                start = None
                current = _next_speaker(current, len(speakers), rng)
            t += d
    if start is not None:
        segments.append((start, t, current))

    n = int(round(cfg.total_duration_s * SAMPLE_RATE))
    audio = cfg.noise_level * rng.standard_normal(n)
    out_segments = []
    for i, (on, off, who) in enumerate(segments):
        # millisecond grid so RTTM round-trips exactly
        lo = int(round(on * 1000)) * (SAMPLE_RATE // 1000)
        hi = min(n, int(round(off * 1000)) * (SAMPLE_RATE // 1000))
        if hi - lo < int(0.2 * SAMPLE_RATE):
            continue
        utt = render_utterance(speakers[who], (hi - lo) / SAMPLE_RATE, rng_seed=cfg.seed * 100003 + i)
        audio[lo:hi] += rng.uniform(0.6, 1.0) * utt.samples
        out_segments.append((lo / SAMPLE_RATE, hi / SAMPLE_RATE, speaker_label(who)))
    return AudioBuffer(np.clip(audio, -1.0, 1.0)), out_segments


def _next_speaker(current: int, n: int, rng) -> int:
    if n == 1:
        return current
    step = int(rng.integers(1, n))
    return (current + step) % n


def timeline_ratios(segments, total_duration_s: float, step_s: float = 0.01) -> tuple[float, float, float]:
    """Silence / single / overlap fractions by counting active speakers at
    the centre of each ``step_s`` cell."""
    n = int(round(total_duration_s / step_s))
    centres = (np.arange(n) + 0.5) * step_s
    active = np.zeros(n, dtype=int)
    for on, off, _ in segments:
        active += (centres >= on) & (centres < off)
    return float(np.mean(active == 0)), float(np.mean(active == 1)), float(np.mean(active >= 2))


# -- corpus assembly -------------------------------------------------------


@dataclass(frozen=True)
class CorpusConfig:
    """Sizes of the three synthetic pools: a speaker-labelled utterance set
    (classification), a diarised conversation set (VAD/OSD) and a held-out
    conversation set with unseen speakers (evaluation)."""

    num_train_speakers: int = 160
    utterances_per_speaker: int = 6
    utterance_s: float = 6.0
    num_diar_speakers: int = 600
    num_diar_conversations: int = 240
    diar_conversation_s: float = 30.0
    num_eval_speakers: int = 24
    num_eval_conversations: int = 10
    eval_conversation_s: float = 300.0
    speakers_per_conversation: tuple = (2, 4)
    noise_level: float = 3e-3
    seed: int = 0


@dataclass
class SyntheticCorpus:
    utterances: list = field(default_factory=list)  # (AudioBuffer, speaker_index)
    diarized: list = field(default_factory=list)  # (AudioBuffer, segments, roster)
    evaluation: list = field(default_factory=list)
    manifests: dict = field(default_factory=dict)


def _conversations(pool, count, duration, cfg: CorpusConfig, seed_base, rng):
    out = []
    lo, hi = cfg.speakers_per_conversation
    for c in range(count):
        k = int(rng.integers(lo, hi + 1))
        roster = sorted(rng.choice(len(pool), size=k, replace=False).tolist())
        conv_cfg = ConversationConfig(num_speakers=k, total_duration_s=duration,
                                      noise_level=cfg.noise_level, seed=seed_base + c)
        audio, segs = generate_conversation([pool[i] for i in roster], conv_cfg)
        out.append((audio, segs, [pool[i].seed for i in roster]))
    return out


def build_corpus(cfg: CorpusConfig) -> SyntheticCorpus:
    base = int(cfg.seed) * 1_000_000
    train = [sample_speaker(base + i) for i in range(cfg.num_train_speakers)]
    diar = [sample_speaker(base + 100_000 + i) for i in range(cfg.num_diar_speakers)]
    heldout = [sample_speaker(base + 200_000 + i) for i in range(cfg.num_eval_speakers)]
    rng = np.random.default_rng([int(cfg.seed), 0xC0290])
    corpus = SyntheticCorpus()
    for s, spk in enumerate(train):
        for u in range(cfg.utterances_per_speaker):
            # same level range and noise floor as the conversations
            urng = np.random.default_rng([int(cfg.seed), s, u, 0x077])
            clean = render_utterance(spk, cfg.utterance_s, rng_seed=u).samples
            noisy = urng.uniform(0.6, 1.0) * clean + cfg.noise_level * urng.standard_normal(len(clean))
            corpus.utterances.append((AudioBuffer(np.clip(noisy, -1.0, 1.0)), s))
    corpus.diarized = _conversations(diar, cfg.num_diar_conversations, cfg.diar_conversation_s, cfg,
                                     base + 300_000, rng)
    corpus.evaluation = _conversations(heldout, cfg.num_eval_conversations, cfg.eval_conversation_s, cfg,
                                       base + 400_000, rng)
    return corpus


def write_corpus(corpus: SyntheticCorpus, out_dir) -> dict:
    """Write WAV + RTTM files and the tab-separated manifests
    ``speakers.tsv`` (wav, speaker_id), ``diarized.tsv`` and ``eval.tsv``
    (wav, rttm). Returns the manifest paths."""
    from .rttm import RttmRecord, write_rttm_file

    out_dir = os.fspath(out_dir)
    for sub in ("utterances", "diarized", "eval"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    lines = []
    for i, (audio, spk) in enumerate(corpus.utterances):
        path = os.path.join(out_dir, "utterances", f"utt{i:05d}.wav")
        write_wav(path, audio)
        lines.append(f"{os.path.abspath(path)}\tspk{spk:03d}")
    manifests = {"speakers": os.path.join(out_dir, "speakers.tsv")}
    _write_lines(manifests["speakers"], lines)
    for name, convs in (("diarized", corpus.diarized), ("eval", corpus.evaluation)):
        lines = []
        for i, (audio, segs, _) in enumerate(convs):
            file_id = f"{name}{i:03d}"
            wav = os.path.join(out_dir, name, file_id + ".wav")
            rttm = os.path.join(out_dir, name, file_id + ".rttm")
            write_wav(wav, audio)
            write_rttm_file(rttm, [RttmRecord(file_id, on, off - on, lab) for on, off, lab in segs])
            lines.append(f"{os.path.abspath(wav)}\t{os.path.abspath(rttm)}")
        manifests[name] = os.path.join(out_dir, f"{name}.tsv")
        _write_lines(manifests[name], lines)
    corpus.manifests = manifests
    return manifests


def _write_lines(path, lines) -> None:
    with open(path, "w") as fh:
        fh.write("".join(line + "\n" for line in lines))
