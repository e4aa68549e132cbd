import os

import pytest

import jointdiar.cli as cli
from jointdiar.autodiff import NumericalError
from jointdiar.cli import main, score_files
from jointdiar.metrics import aggregate, compute_der
from jointdiar.rttm import group_by_file, read_rttm_file
from tiny import read_manifest, run_chain


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("chain")
    return root, run_chain(root)


def test_chain_outputs(chain):
    root, rttms = chain
    assert sorted(rttms) == ["eval000.rttm", "eval001.rttm"]
    assert all(blob.startswith(b"SPEAKER eval00") for blob in rttms.values())
    log = (root / "log.csv").read_text().splitlines()
    assert log[0].startswith("epoch,step") and len(log) == 5


def test_run_equals_extract_then_diarize(chain, tmp_path):
    root, rttms = chain
    cfg = str(root / "tiny.cfg")
    assert main(["--config", cfg, "--seed", "3", "run", "--manifest", str(root / "corpus" / "eval.tsv"),
                 "--model", str(root / "m.jdmx"), "--plda", str(root / "p.plda"),
                 "--out-dir", str(tmp_path)]) == 0
    for name, blob in rttms.items():
        assert (tmp_path / name).read_bytes() == blob


def test_score_delegates_and_aggregates(chain, tmp_path, capsys):
    root, _ = chain
    refs = [r for _, r in read_manifest(root / "corpus" / "eval.tsv")]
    hyps = sorted(str(p) for p in (root / "rttm").iterdir())
    out_csv = tmp_path / "s.csv"
    assert main(["score", "--ref", *refs, "--hyp", *hyps, "--csv", str(out_csv)]) == 0
    rows = score_files(refs, hyps)
    per_file = []
    for ref, hyp in zip(refs, hyps):
        (fid, segs), = group_by_file(read_rttm_file(ref)).items()
        want = compute_der(segs, group_by_file(read_rttm_file(hyp))[fid])
        per_file.append(want)
        assert dict(rows)[fid] == want
    total = dict(rows)["TOTAL"]
    assert total == aggregate(per_file)
    speech = sum(b.ref_speech_s for b in per_file)
    errors = sum(b.miss_s + b.fa_s + b.conf_s for b in per_file)
    assert total.der_pct == pytest.approx(100 * errors / speech, abs=1e-9)
    assert out_csv.read_text().splitlines()[0] == "file,der,miss,fa,conf,ref_speech_s"
    assert "TOTAL" in capsys.readouterr().out


def test_score_identical_files_is_zero(chain, capsys):
    root, _ = chain
    ref = read_manifest(root / "corpus" / "eval.tsv")[0][1]
    assert main(["score", "--ref", ref, "--hyp", ref]) == 0
    total = dict(score_files([ref], [ref]))["TOTAL"]
    assert (total.der_pct, total.miss_pct, total.fa_pct, total.conf_pct) == (0, 0, 0, 0)


def test_benchmark_command(chain, capsys):
    root, _ = chain
    wav = read_manifest(root / "corpus" / "eval.tsv")[0][0]
    assert main(["benchmark", "--model", str(root / "m.jdmx"), "--wav", wav]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[1].startswith("per-segment,75,") and lines[2].startswith("per-frame,1,")


def test_grid_search_command(chain, tmp_path, capsys):
    root, _ = chain
    refs = [r for _, r in read_manifest(root / "corpus" / "eval.tsv")]
    archives = sorted(str(p) for p in (root / "arch").iterdir())
    dev = tmp_path / "dev.tsv"
    dev.write_text("".join(f"{a}\t{r}\n" for a, r in zip(archives, refs)))
    out = tmp_path / "best.cfg"
    args = ["--config", str(root / "tiny.cfg"), "grid-search", "--dev", str(dev), "--plda", str(root / "p.plda"),
            "--fa", "0.05,0.3", "--out", str(out)]
    assert main(args) == 0
    assert out.read_text().startswith("vbx.fa = ")
    assert main(args[:-2] + ["--fa", ""]) == 1


def test_exit_codes(tmp_path, capsys, monkeypatch):
    assert main([]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["score"])
    assert exc.value.code == 1
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("vbx.nope = 1\n")
    assert main(["--config", str(bad_cfg), "score", "--ref", "x", "--hyp", "x"]) == 1
    assert main(["score", "--ref", str(tmp_path / "missing.rttm"), "--hyp", "x"]) == 2
    broken = tmp_path / "broken.rttm"
    broken.write_text("SPEAKER f 1 0.0 -1.0 <NA> <NA> a <NA> <NA>\n")
    assert main(["score", "--ref", str(broken), "--hyp", str(broken)]) == 2
    assert "line 1" in capsys.readouterr().err

    def boom(args, st):
        raise NumericalError("non-finite loss")

    parser = cli.build_parser()
    ns = parser.parse_args(["score", "--ref", "a", "--hyp", "b"])
    ns.func = boom
    monkeypatch.setattr(cli, "build_parser", lambda: _Fixed(parser, ns))
    assert main(["score", "--ref", "a", "--hyp", "b"]) == 3


class _Fixed:
    def __init__(self, parser, ns):
        self.parser, self.ns = parser, ns

    def parse_args(self, argv):
        return self.ns

    def print_usage(self, *a):
        pass


def test_extract_without_inputs_is_usage_error(chain):
    root, _ = chain
    assert main(["extract", "--model", str(root / "m.jdmx"), "--out-dir", os.fspath(root / "x")]) == 1
