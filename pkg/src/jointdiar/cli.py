"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 I/O or parse failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from .archive import ArchiveError, load_archive, save_archive
from .autodiff import NumericalError
from .features import AudioFormatError, EmptyInputError, compute_log_mel, read_wav
from .losses import AAMConfig, LossWeights
from .metrics import Annotation, aggregate, compute_der, speech_timeline
from .model import EncoderConfig, load_checkpoint, save_checkpoint
from .pipeline import BinarizeConfig, benchmark_extraction, run_diarization
from .plda import PLDAError, load_plda, save_plda
from .recipe import RecipeConfig, extract, train_system
from .rttm import RttmParseError, group_by_file, read_rttm_file, records_from_segments, write_rttm_file
from .synthetic import CorpusConfig, build_corpus, write_corpus
from .trainer import TrainConfig, load_diarized_manifest, load_speaker_manifest
from .tuning import DevRecording, ResultCache, grid_search_hyperparams
from .vbx import VBxConfig

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("jointdiar")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- configuration --------------------------------------------------------------


class Settings:
    """Typed views of the config file sections, with ``--seed`` applied."""

    def __init__(self, sections: dict, seed: int | None):
        self.sections = sections
        s = lambda name: dict(sections.get(name, {}))  # noqa: E731
        train = s("train")
        weights = {k: train.pop(k) for k in ("w_aam", "w_vad", "w_osd") if k in train}
        aam = {k[4:]: train.pop(k) for k in ("aam_scale_s", "aam_margin_m") if k in train}
        if seed is not None:
            train["seed"] = seed
        self.train = cfgmod.build(TrainConfig, train, weights=cfgmod.build(LossWeights, weights),
                                  aam=cfgmod.build(AAMConfig, aam))
        model = s("model")
        if seed is not None:
            model["seed"] = seed
        self.encoder = cfgmod.build(EncoderConfig, model)
        corpus = s("corpus")
        if seed is not None:
            corpus["seed"] = seed
        self.corpus = cfgmod.build(CorpusConfig, corpus)
        self.recipe = cfgmod.build(RecipeConfig, s("recipe"))
        self.vbx = cfgmod.build(VBxConfig, s("vbx"))
        self.binarize = cfgmod.build(BinarizeConfig, s("binarize"))
        self.grid = s("grid")


def _settings(args) -> Settings:
    sections = cfgmod.load_config(args.config) if args.config else {}
    return Settings(sections, args.seed)


# -- helpers ---------------------------------------------------------------------


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _read_pairs(path) -> list[tuple[str, str]]:
    rows = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{line_no}: expected two tab-separated fields")
            rows.append((parts[0], parts[1]))
    return rows


def _write_rttm(path, file_id: str, annotation: Annotation) -> None:
    write_rttm_file(path, records_from_segments(file_id, list(annotation)))


def _reference(rttm_path: str, file_id: str | None = None) -> Annotation:
    groups = group_by_file(read_rttm_file(rttm_path))
    if file_id is not None and file_id in groups:
        return Annotation(groups[file_id])
    return Annotation([s for segs in groups.values() for s in segs])


# -- subcommands -------------------------------------------------------------------


def cmd_simulate(args, st: Settings) -> int:
    corpus = build_corpus(st.corpus)
    manifests = write_corpus(corpus, args.out)
    for name, path in sorted(manifests.items()):
        print(f"{name}\t{path}")
    return EXIT_OK


def cmd_train(args, st: Settings) -> int:
    utts, names = load_speaker_manifest(args.speakers)
    diarized = load_diarized_manifest(args.diarized)
    finetune = load_diarized_manifest(args.finetune) if args.finetune else None
    system = train_system(utts, diarized, st.encoder, st.train, st.recipe, finetune)
    save_checkpoint(args.model, system.model)
    save_plda(args.plda, system.plda)
    if args.log:
        system.log.write(args.log)
    print(f"model\t{args.model}\nplda\t{args.plda}\nspeakers\t{len(names)}")
    return EXIT_OK


def _extract_many(model, wavs, out_dir) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for wav in wavs:
        path = os.path.join(out_dir, _stem(wav) + ".pfem")
        save_archive(path, extract(model, read_wav(wav)))
        paths.append(path)
    return paths


def _wav_inputs(args) -> list[str]:
    wavs = list(args.wav or [])
    if args.manifest:
        wavs += [w for w, _ in _read_pairs(args.manifest)]
    if not wavs:
        raise UsageError("no input recordings (give WAV paths or --manifest)")
    return wavs


def cmd_extract(args, st: Settings) -> int:
    model = load_checkpoint(args.model)
    for path in _extract_many(model, _wav_inputs(args), args.out_dir):
        print(path)
    return EXIT_OK


def _diarize_many(archives, plda, st: Settings, out_dir, overlap: bool) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    out = []
    for path in archives:
        ann = run_diarization(load_archive(path), plda, st.vbx, st.binarize, overlap=overlap)
        rttm = os.path.join(out_dir, _stem(path) + ".rttm")
        _write_rttm(rttm, _stem(path), ann)
        out.append(rttm)
    return out


def cmd_diarize(args, st: Settings) -> int:
    plda = load_plda(args.plda)
    for path in _diarize_many(args.archive, plda, st, args.out_dir, not args.no_overlap):
        print(path)
    return EXIT_OK


def cmd_run(args, st: Settings) -> int:
    model = load_checkpoint(args.model)
    plda = load_plda(args.plda)
    os.makedirs(args.out_dir, exist_ok=True)
    for wav in _wav_inputs(args):
        ann = run_diarization(extract(model, read_wav(wav)), plda, st.vbx, st.binarize,
                              overlap=not args.no_overlap)
        rttm = os.path.join(args.out_dir, _stem(wav) + ".rttm")
        _write_rttm(rttm, _stem(wav), ann)
        print(rttm)
    return EXIT_OK


SCORE_FIELDS = ("file", "der", "miss", "fa", "conf", "ref_speech_s")


def score_files(ref_paths, hyp_paths):
    """Per-file and aggregate DER rows; files are matched by RTTM file id."""
    ref, hyp = {}, {}
    for p in ref_paths:
        ref.update(group_by_file(read_rttm_file(p)))
    for p in hyp_paths:
        hyp.update(group_by_file(read_rttm_file(p)))
    rows = []
    for file_id in sorted(ref):
        rows.append((file_id, compute_der(ref[file_id], hyp.get(file_id, []))))
    rows.append(("TOTAL", aggregate([b for _, b in rows])))
    return rows


def format_score_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_FIELDS)
    for name, b in rows:
        w.writerow([name, f"{b.der_pct:.2f}", f"{b.miss_pct:.2f}", f"{b.fa_pct:.2f}", f"{b.conf_pct:.2f}",
                    f"{b.ref_speech_s:.3f}"])
    return buf.getvalue()


def cmd_score(args, st: Settings) -> int:
    rows = score_files(args.ref, args.hyp)
    print(f"{'file':<20} {'DER':>7} {'Miss':>7} {'FA':>7} {'Conf':>7}")
    for name, b in rows:
        print(f"{name:<20} {b.der_pct:7.2f} {b.miss_pct:7.2f} {b.fa_pct:7.2f} {b.conf_pct:7.2f}")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(format_score_csv(rows))
    return EXIT_OK


def cmd_benchmark(args, st: Settings) -> int:
    model = load_checkpoint(args.model)
    audio = read_wav(args.wav)
    feats = compute_log_mel(audio)
    speech = speech_timeline(_reference(args.rttm)) if args.rttm else [(0.0, audio.duration)]
    rep = benchmark_extraction(feats, model, speech, args.window, args.step)
    print(f"method,encoder_passes,wall_time_s\nper-segment,{rep.per_segment_windows},{rep.per_segment_s:.4f}\n"
          f"per-frame,{rep.per_frame_passes},{rep.per_frame_s:.4f}\nspeedup,,{rep.speedup:.2f}")
    return EXIT_OK


def cmd_grid_search(args, st: Settings) -> int:
    plda = load_plda(args.plda)
    dev = []
    for arch, rttm in _read_pairs(args.dev):
        dev.append(DevRecording(_stem(arch), load_archive(arch), _reference(rttm, _stem(arch))))
    grid = dict(st.grid)
    for key in ("fa", "fb", "ploop", "ahc_threshold"):
        value = getattr(args, key)
        if value:
            grid[key] = tuple(cfgmod.parse_value(value)) if "," in value else (cfgmod.parse_value(value),)
    if not grid:
        raise cfgmod.ConfigError("empty grid")
    best, table = grid_search_hyperparams(dev, grid, plda, st.vbx, st.binarize, ResultCache(args.cache))
    for cfg, der in table:
        print(f"fa={cfg.fa} fb={cfg.fb} ploop={cfg.ploop} ahc_threshold={cfg.ahc_threshold} der={der.der_pct:.3f}")
    text = cfgmod.dump_dataclass(best, "vbx")
    print(text, end="")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointdiar", description="Joint embedding/VAD/OSD diarization toolkit")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="overrides corpus, model and training seeds")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic corpus")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="two-stage training plus PLDA")
    s.add_argument("--speakers", required=True, help="manifest: wav<TAB>speaker_id")
    s.add_argument("--diarized", required=True, help="manifest: wav<TAB>rttm")
    s.add_argument("--finetune", help="optional target-domain manifest for VAD/OSD fine-tuning")
    s.add_argument("--model", required=True, help="output checkpoint (JDMX)")
    s.add_argument("--plda", required=True, help="output PLDA file")
    s.add_argument("--log", help="training log CSV")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("extract", cmd_extract, "write per-frame archives"),
                                 ("run", cmd_run, "extract and diarize in one go")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("wav", nargs="*")
        s.add_argument("--manifest", help="take WAV paths from the first column of a manifest")
        s.add_argument("--model", required=True)
        if name == "run":
            s.add_argument("--plda", required=True)
            s.add_argument("--no-overlap", action="store_true", help="skip second-speaker assignment")
        s.add_argument("--out-dir", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("diarize", help="cluster per-frame archives into RTTM")
    s.add_argument("archive", nargs="+")
    s.add_argument("--plda", required=True)
    s.add_argument("--no-overlap", action="store_true")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_diarize)

    s = sub.add_parser("score", help="collar-free DER")
    s.add_argument("--ref", nargs="+", required=True)
    s.add_argument("--hyp", nargs="+", required=True)
    s.add_argument("--csv", help="also write the table as CSV")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("benchmark", help="per-segment vs per-frame extraction timing")
    s.add_argument("--model", required=True)
    s.add_argument("--wav", required=True)
    s.add_argument("--rttm", help="count sliding windows over this reference's speech only")
    s.add_argument("--window", type=float, default=1.5)
    s.add_argument("--step", type=float, default=0.25)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("grid-search", help="pick VBx hyperparameters by dev DER")
    s.add_argument("--dev", required=True, help="manifest: archive<TAB>rttm")
    s.add_argument("--plda", required=True)
    for key in ("fa", "fb", "ploop", "ahc_threshold"):
        s.add_argument("--" + key.replace("_", "-"), dest=key, help="comma-separated candidates")
    s.add_argument("--cache", help="JSON result cache")
    s.add_argument("--out", help="write the best config here")
    s.set_defaults(func=cmd_grid_search)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, _settings(args))
    except UsageError as exc:
        print(f"jointdiar: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except cfgmod.ConfigError as exc:
        print(f"jointdiar: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"jointdiar: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, RttmParseError, AudioFormatError, ArchiveError, PLDAError, EmptyInputError,
            ValueError) as exc:
        print(f"jointdiar: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
