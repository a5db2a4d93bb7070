"""End-to-end tests for the command-line pipeline."""

import os

import pytest

from bimamba.cli import (
    EXIT_FAILURE,
    EXIT_OK,
    EXIT_USAGE,
    PRESET_NAMES,
    VALID_KEYS,
    config_hash,
    main,
)
from bimamba.model import PRESETS
from bimamba.train import LOG_HEADER


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A corpus plus a 3-step tiny teacher shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("cli")
    assert (
        run("make-corpus", "--out", str(root / "corpus"), "--n-bytes", "20000", "--seed", "1")
        == EXIT_OK
    )
    corpus = root / "corpus" / "corpus.txt"
    assert (
        run(
            "train-teacher",
            "--out", str(root / "teacher"),
            "--corpus", str(corpus),
            "--steps", "3",
            "--set", "train.seq_len=32",
            "--set", "train.batch_tokens=64",
            "--set", "train.warmup=1",
        )
        == EXIT_OK
    )
    return {"root": root, "corpus": corpus, "teacher": root / "teacher" / "teacher.bmb"}


def test_preset_names_match_model_registry():
    assert set(PRESET_NAMES) == set(PRESETS)


def test_storage_report_full_27b(capsys):
    assert run("storage-report", "--preset", "2.7B", "--scope", "full") == EXIT_OK
    out = capsys.readouterr().out
    assert "baseline\t5.03 GB" in out
    assert "ratio\t89.1%" in out


def test_storage_report_partial_27b(capsys):
    assert run("storage-report", "--preset", "2.7B", "--scope", "partial") == EXIT_OK
    assert "ratio\t60.1%" in capsys.readouterr().out


def test_census_780m(capsys):
    assert run("census", "--preset", "780M") == EXIT_OK
    out = capsys.readouterr().out
    assert "In Proj." in out and "Out Proj." in out
    assert "Total\t780161280\t100.00%" in out


def test_make_corpus_deterministic(tmp_path):
    for name in ("a", "b"):
        assert (
            run("make-corpus", "--out", str(tmp_path / name), "--n-bytes", "512", "--seed", "9")
            == EXIT_OK
        )
    a = (tmp_path / "a" / "corpus.txt").read_bytes()
    b = (tmp_path / "b" / "corpus.txt").read_bytes()
    assert a == b and len(a) == 512
    assert not (tmp_path / "a" / ".incomplete").exists()


def test_teacher_artifacts(workdir):
    out = workdir["root"] / "teacher"
    assert workdir["teacher"].exists()
    assert not (out / ".incomplete").exists()
    log = (out / "train.log").read_text().splitlines()
    assert log[0] == LOG_HEADER
    manifest = dict(
        line.split("=", 1) for line in (out / "manifest.txt").read_text().splitlines()
    )
    assert manifest["command"].startswith("bimamba train-teacher")
    assert manifest["seed"] == "0"
    assert len(manifest["config_hash"]) == 16
    assert manifest["version"]


def test_distill_runs_are_byte_identical(workdir, tmp_path):
    argv = [
        "distill",
        "--teacher", str(workdir["teacher"]),
        "--corpus", str(workdir["corpus"]),
        "--steps", "2",
        "--seed", "7",
        "--set", "train.seq_len=32",
        "--set", "train.batch_tokens=64",
        "--set", "train.warmup=1",
    ]
    assert run(*argv, "--out", str(tmp_path / "r1")) == EXIT_OK
    assert run(*argv, "--out", str(tmp_path / "r2")) == EXIT_OK
    s1 = (tmp_path / "r1" / "student.bmb").read_bytes()
    s2 = (tmp_path / "r2" / "student.bmb").read_bytes()
    assert s1 == s2
    m1 = (tmp_path / "r1" / "manifest.txt").read_text()
    m2 = (tmp_path / "r2" / "manifest.txt").read_text()
    assert (
        [l for l in m1.splitlines() if not l.startswith("command")]
        == [l for l in m2.splitlines() if not l.startswith("command")]
    )


def test_ptb_pack_ppl_chain(workdir, tmp_path, capsys):
    teacher = str(workdir["teacher"])
    corpus = str(workdir["corpus"])
    assert run("ptb", "--teacher", teacher, "--out", str(tmp_path / "ptb")) == EXIT_OK
    ptb = str(tmp_path / "ptb" / "ptb.bmb")
    assert run("pack", "--model", ptb, "--out", str(tmp_path / "packed")) == EXIT_OK
    packed = str(tmp_path / "packed" / "packed.bmb")
    assert os.path.getsize(packed) < os.path.getsize(ptb)

    for model in (teacher, ptb, packed):
        capsys.readouterr()
        assert run("ppl", "--model", model, "--corpus", corpus, "--seq-len", "32") == EXIT_OK
        out = capsys.readouterr().out
        assert "tokens=" in out and "ppl=" in out

    assert (
        run(
            "ppl",
            "--model", teacher,
            "--corpus", corpus,
            "--seq-len", "32",
            "--out", str(tmp_path / "ppl"),
        )
        == EXIT_OK
    )
    assert "ppl=" in (tmp_path / "ppl" / "ppl.txt").read_text()


def test_hist_command(workdir, tmp_path, capsys):
    assert (
        run(
            "hist",
            "--model", str(workdir["teacher"]),
            "--module", "out_proj",
            "--bins", "16",
            "--out", str(tmp_path / "h"),
        )
        == EXIT_OK
    )
    assert "saturation=" in capsys.readouterr().out
    csv_lines = (tmp_path / "h" / "hist.csv").read_text().splitlines()
    assert csv_lines[0] == "bin_lo,bin_hi,count"
    assert len(csv_lines) == 17


def test_bench_command(tmp_path, capsys):
    assert (
        run("bench", "--preset", "tiny", "--n-tokens", "8", "--out", str(tmp_path / "b"))
        == EXIT_OK
    )
    out = capsys.readouterr().out
    assert "packed:" in out and "dense:" in out
    lines = (tmp_path / "b" / "bench.csv").read_text().splitlines()
    assert lines[0] == "path,tokens_per_s,std,peak_bytes"
    assert len(lines) == 3


def test_bench_accepts_packed_checkpoint(workdir, tmp_path, capsys):
    # a deployment file has no latent weights; the dense twin is rebuilt
    # from the bit planes so both paths can still be compared
    assert run("ptb", "--teacher", str(workdir["teacher"]), "--out", str(tmp_path / "ptb")) == EXIT_OK
    assert run("pack", "--model", str(tmp_path / "ptb" / "ptb.bmb"), "--out", str(tmp_path / "pk")) == EXIT_OK
    packed = str(tmp_path / "pk" / "packed.bmb")
    assert run("bench", "--model", packed, "--n-tokens", "8", "--out", str(tmp_path / "b")) == EXIT_OK
    out = capsys.readouterr().out
    assert "packed:" in out and "dense:" in out
    assert (tmp_path / "b" / "bench.csv").exists()


def test_scaling_command(tmp_path, capsys):
    assert (
        run("scaling", "--preset", "tiny", "--lengths", "64,128", "--out", str(tmp_path / "s"))
        == EXIT_OK
    )
    assert "ns/token" in capsys.readouterr().out
    lines = (tmp_path / "s" / "scaling.csv").read_text().splitlines()
    assert lines[0] == "length,ns_per_token"
    assert len(lines) == 3


def test_unknown_set_key_is_usage_error(capsys):
    assert run("census", "--set", "model.heads=4") == EXIT_USAGE
    err = capsys.readouterr().err
    assert "model.heads" in err
    for key in VALID_KEYS:
        assert key in err


def test_unknown_config_file_key_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[model]\nwidth = 64\n")
    assert run("census", "--config", str(cfg)) == EXIT_USAGE
    assert "model.width" in capsys.readouterr().err


def test_bad_config_value_is_usage_error(capsys):
    assert run("census", "--set", "model.scope=sometimes") == EXIT_USAGE
    assert run("census", "--set", "model.d_model=-4") == EXIT_USAGE
    capsys.readouterr()


def test_malformed_set_pair(capsys):
    assert run("census", "--set", "model.d_model") == EXIT_USAGE
    assert "key=value" in capsys.readouterr().err


def test_flags_win_over_config_file(workdir, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(
        "[train]\nsteps = 4\nseq_len = 32\nbatch_tokens = 64\nwarmup = 1\n"
        f"[io]\ncorpus = {workdir['corpus']}\n"
    )
    assert (
        run(
            "train-teacher",
            "--config", str(cfg),
            "--steps", "2",
            "--out", str(tmp_path / "t"),
        )
        == EXIT_OK
    )
    log = (tmp_path / "t" / "train.log").read_text().splitlines()
    assert log[-1].startswith("1\t")  # final step index = steps - 1


def test_missing_teacher_fails_with_marker(workdir, tmp_path, capsys):
    out = tmp_path / "broken"
    assert (
        run(
            "distill",
            "--teacher", str(tmp_path / "nope.bmb"),
            "--corpus", str(workdir["corpus"]),
            "--steps", "1",
            "--set", "train.warmup=0",
            "--out", str(out),
        )
        == EXIT_FAILURE
    )
    assert "error" in capsys.readouterr().err
    assert (out / ".incomplete").exists()


def test_missing_corpus_is_runtime_failure(workdir, tmp_path, capsys):
    assert (
        run(
            "train-teacher",
            "--corpus", str(tmp_path / "nope.txt"),
            "--steps", "1",
            "--set", "train.warmup=0",
            "--out", str(tmp_path / "t"),
        )
        == EXIT_FAILURE
    )
    capsys.readouterr()


def test_thread_pinning(monkeypatch):
    monkeypatch.setenv("BIMAMBA_THREADS", "3")
    assert run("census", "--preset", "tiny") == EXIT_OK
    assert os.environ["OPENBLAS_NUM_THREADS"] == "3"
    assert run("census", "--preset", "tiny", "--threads", "2") == EXIT_OK
    assert os.environ["OPENBLAS_NUM_THREADS"] == "2"
    monkeypatch.setenv("BIMAMBA_THREADS", "many")
    assert run("census", "--preset", "tiny") == EXIT_USAGE
    assert run("census", "--preset", "tiny", "--threads", "0") == EXIT_USAGE


def test_config_hash_tracks_content():
    a = config_hash({"seed": 0, "train.steps": 5})
    b = config_hash({"seed": 0, "train.steps": 6})
    assert a != b and len(a) == 16
    assert a == config_hash({"train.steps": 5, "seed": 0})


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as exc:
        run("--help")
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for name in ("train-teacher", "distill", "ptb", "pack", "ppl", "bench", "scaling", "census", "storage-report", "hist"):
        assert name in out


def test_unknown_subcommand_exits_two(capsys):
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == EXIT_USAGE
    capsys.readouterr()
