import logging

import numpy as np
import pytest

from nacanon import cli
from nacanon.anon import BUNDLE_FILES
from nacanon.config import describe_keys
from nacanon.dsp import read_wav
from nacanon.evaluation import MetricsReport

from conftest import SMALL, TINY


def sets(d):
    out = []
    for k, v in d.items():
        out += ["--set", f"{k}={v}"]
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-corpus", str(root / "corpus"), *sets(SMALL)]) == 0
    assert cli.main(["train", str(root / "corpus" / "manifest.tsv"), str(root / "bundle"), *sets(TINY)]) == 0
    return root


def test_gen_corpus_writes_manifest(workspace):
    lines = (workspace / "corpus" / "manifest.tsv").read_text().splitlines()
    assert len(lines) == SMALL["n_speakers"] * SMALL["utts_per_speaker"]


def test_gen_corpus_is_reproducible(workspace, tmp_path):
    assert cli.main(["gen-corpus", str(tmp_path / "c2"), *sets(SMALL)]) == 0
    for wav in sorted((workspace / "corpus" / "wav").iterdir())[:5]:
        assert wav.read_bytes() == (tmp_path / "c2" / "wav" / wav.name).read_bytes()


def test_existing_dir_needs_force(workspace, capsys):
    assert cli.main(["gen-corpus", str(workspace / "corpus"), *sets(SMALL)]) == 2
    assert "exists" in capsys.readouterr().err


def test_missing_manifest_is_usage_error(tmp_path):
    assert cli.main(["train", str(tmp_path / "nope.tsv"), str(tmp_path / "b")]) == 2


def test_bad_config_is_usage_error(tmp_path):
    assert cli.main(["gen-corpus", str(tmp_path / "c"), "--set", "bogus=1"]) == 2
    assert cli.main(["gen-corpus", str(tmp_path / "c"), "--set", "n_s"]) == 2


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    out = capsys.readouterr().out
    for line in describe_keys().splitlines():
        assert line.split()[0].split("=")[0] in out


def test_train_writes_bundle(workspace):
    names = {p.name for p in (workspace / "bundle").iterdir()}
    assert set(BUNDLE_FILES.values()) <= names
    assert "config.txt" in names


def test_anonymize_single_wav(workspace, tmp_path):
    wav = workspace / "corpus" / "wav" / "spk005_u04.wav"
    out = tmp_path / "a.wav"
    args = ["anonymize", str(workspace / "bundle"), "--wav", str(wav), "--out", str(out),
            "--speaker-id", "spk005", "--level", "utterance", "--seed", "7"]
    assert cli.main(args) == 0
    first = out.read_bytes()
    assert cli.main(args) == 0
    assert out.read_bytes() == first
    n_frames = 1 + (len(read_wav(wav)) - 400) // 320
    assert len(read_wav(out)) == (n_frames - 1) * 320 + 640


def test_anonymize_speaker_level_shares_prompt(workspace, tmp_path, caplog):
    manifest = tmp_path / "m.tsv"
    src = (workspace / "corpus" / "manifest.tsv").read_text().splitlines()
    picked = [l for l in src if l.startswith("spk004_u0")][:2]
    base = workspace / "corpus"
    manifest.write_text("".join("\t".join([*l.split("\t")[:2], str(base / l.split("\t")[2]), str(base / l.split("\t")[3])]) + "\n" for l in picked))
    with caplog.at_level(logging.INFO, logger="nacanon"):
        assert cli.main(["anonymize", str(workspace / "bundle"), "--manifest", str(manifest), "--out", str(tmp_path / "o")]) == 0
    prompts = {r.getMessage().split("-> prompt")[1] for r in caplog.records if "-> prompt" in r.getMessage()}
    assert len(prompts) == 1
    assert len(list((tmp_path / "o").iterdir())) == 2


def test_anonymize_missing_input(workspace, tmp_path):
    assert cli.main(["anonymize", str(workspace / "bundle"), "--wav", str(tmp_path / "x.wav"), "--out", str(tmp_path / "y.wav")]) == 2
    assert cli.main(["anonymize", str(tmp_path / "nobundle"), "--wav", "x", "--out", "y"]) == 2


def test_evaluate_report_and_seed_warning(workspace, tmp_path, caplog):
    with caplog.at_level(logging.WARNING, logger="nacanon"):
        code = cli.main(["evaluate", str(workspace / "bundle"), str(workspace / "corpus" / "manifest.tsv"),
                         str(tmp_path / "ev"), "--attacker-seed", str(TINY.get("anon_seed", 3))])
    assert code == 0
    assert any("attacker_seed equals anon_seed" in r.getMessage() for r in caplog.records)
    report = MetricsReport.from_text((tmp_path / "ev" / "report.txt").read_text())
    for key in ("eer_original", "eer_anonymized", "rho_f0", "g_vd_db", "content_error_rate_original",
                "content_error_rate_anonymized", "target_trials", "nontarget_trials"):
        assert key in report
    assert (tmp_path / "ev" / "scores_anonymized.tsv").read_text().count("\n") == int(report["target_trials"]) + int(report["nontarget_trials"])


def test_attack_writes_score_files(workspace, tmp_path):
    assert cli.main(["attack", str(workspace / "bundle"), str(workspace / "corpus" / "manifest.tsv"), str(tmp_path / "at")]) == 0
    rows = (tmp_path / "at" / "scores_original.tsv").read_text().splitlines()
    assert rows and all(len(r.split("\t")) == 4 for r in rows)
    scores = np.array([float(r.split("\t")[2]) for r in rows])
    assert np.isfinite(scores).all()
