import subprocess
import sys

import pytest

from multidec import config
from multidec.cli import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_OK, HYP_COLUMNS, main, read_hypotheses
from multidec.config import ConfigError
from multidec.data import TaskSpec, read_dataset, write_dataset
from multidec.metrics import parse_report
from multidec.models import load_checkpoint
from multidec.search import DecodeConfig, greedy_pipeline
from multidec.train import parse_log

TINY = """\
[task]
n_content=4
len_min=2
len_max=4
feat_dim=3
noise=0.1
n_train=48
n_dev=8
n_test=8

[model]
d=8
heads=2
ffn_dim=16
enc_asr_layers=1
dec_asr_layers=1
enc_st_layers=1
dec_st_layers=1

[train]
epochs=2
batch_size=8
warmup=10

[decode]
beam_asr=2
beam_st=2

[lm]
d=8
heads=2
ffn_dim=16
layers=1
epochs=1
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A generated dataset, trained model and LM shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data"), "--domain-shift"]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "m.ckpt")]) == EXIT_OK
    assert main(["train-lm", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "lm.ckpt"),
                 "--held-out", "dev"]) == EXIT_OK
    return root


def run(*argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------- config files


def test_config_text_round_trip():
    spec = TaskSpec(noise=0.25, frames_per_token=(2, 6))
    assert config.from_text(TaskSpec, config.to_text(spec)) == spec
    dec = DecodeConfig(lm_weight=0.2, oracle=True)
    assert config.from_text(DecodeConfig, config.to_text(dec)) == dec


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown field 'beem'"):
        config.from_mapping(DecodeConfig, {"beem": "3"}, "decode")
    with pytest.raises(ConfigError, match="beam_asr: cannot parse"):
        config.from_mapping(DecodeConfig, {"beam_asr": "many"}, "decode")
    bad = tmp_path / "bad.ini"
    bad.write_text("[tusk]\nx=1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        config.read_sections(bad)
    with pytest.raises(ConfigError, match="cannot read"):
        config.read_sections(tmp_path / "missing.ini")


# ---------------------------------------------------------------- pipeline


def test_gen_data_writes_splits(work):
    names = sorted(p.name for p in (work / "data").glob("*.mdds"))
    assert names == ["dev.mdds", "lm_shift.mdds", "test.mdds", "test_shift.mdds", "train.mdds"]
    spec, train = read_dataset(work / "data" / "train.mdds")
    assert len(train) == 48 and spec.n_content == 4
    shifted, _ = read_dataset(work / "data" / "test_shift.mdds")
    assert shifted.domain != spec.domain
    assert (work / "m.log.tsv").read_text().startswith("# [model] arch=multidec")


def test_gen_data_is_byte_identical(work, tmp_path):
    assert run("gen-data", "--config", work / "tiny.ini", "--out", tmp_path, "--domain-shift") == EXIT_OK
    for path in (work / "data").iterdir():
        assert (tmp_path / path.name).read_bytes() == path.read_bytes(), path.name


def test_decode_and_eval(work, tmp_path, capsys):
    hyps = tmp_path / "hyps.tsv"
    assert run("decode", "--config", work / "tiny.ini", "--checkpoint", work / "m.ckpt",
               "--data", work / "data" / "test.mdds", "--out", hyps) == EXIT_OK
    rows = read_hypotheses(hyps)
    assert len(rows) == 8
    text = hyps.read_text()
    assert "# [decode] beam_asr=2" in text and "\t".join(HYP_COLUMNS) in text
    capsys.readouterr()
    assert run("eval", "--hyps", hyps, "--data", work / "data" / "test.mdds", "--out", tmp_path / "rep.txt") == EXIT_OK
    printed = capsys.readouterr().out
    rep = parse_report(printed)
    assert rep["overall"]["utterances"] == 8
    assert sum(v["count"] for k, v in rep.items() if k.startswith("bucket ")) == 8
    assert (tmp_path / "rep.txt").read_text() == printed


def test_decode_is_reproducible(work, tmp_path):
    for name, extra in (("a", []), ("b", []), ("c", ["--workers", "2"])):
        assert run("decode", "--config", work / "tiny.ini", "--checkpoint", work / "m.ckpt", "--lm", work / "lm.ckpt",
                   "--lm-weight", "0.2", "--ctc-weight", "0.3", "--data", work / "data" / "test.mdds",
                   "--out", tmp_path / f"{name}.tsv", *extra) == EXIT_OK
    a = (tmp_path / "a.tsv").read_bytes()
    assert a == (tmp_path / "b.tsv").read_bytes()
    # the worker count is recorded in the header; the hypotheses are identical
    body = lambda p: [l for l in p.read_text().splitlines() if not l.startswith("#")]
    assert body(tmp_path / "a.tsv") == body(tmp_path / "c.tsv")


def test_oracle_decode(work, tmp_path, capsys):
    hyps = tmp_path / "oracle.tsv"
    assert run("decode", "--checkpoint", work / "m.ckpt", "--data", work / "data" / "test.mdds", "--out", hyps,
               "--oracle") == EXIT_OK
    _, test = read_dataset(work / "data" / "test.mdds")
    rows = read_hypotheses(hyps)
    assert all(rows[e.uid]["y_b"] == e.y_b for e in test)


def test_eval_of_references_is_perfect(work, tmp_path, capsys):
    _, test = read_dataset(work / "data" / "test.mdds")
    lines = ["\t".join(HYP_COLUMNS)]
    for e in test:
        lines.append("\t".join([e.uid, " ".join(map(str, e.y_b)), " ".join(map(str, e.y_c)), "0.0", "0.0", "0.0"]))
    (tmp_path / "ref.tsv").write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert run("eval", "--hyps", tmp_path / "ref.tsv", "--data", work / "data" / "test.mdds") == EXIT_OK
    rep = parse_report(capsys.readouterr().out)
    assert rep["overall"]["bleu"] == pytest.approx(100.0)
    assert rep["intermediate_wer"]["wer"] == 0.0
    assert rep["bucket <40%"]["count"] == len(test)
    assert "bucket >=80%" not in rep


def test_console_script_entry_point(work):
    proc = subprocess.run([sys.executable, "-m", "multidec.cli", "eval", "--hyps", str(work / "nope.tsv"),
                           "--data", str(work / "data" / "test.mdds")], capture_output=True, text=True)
    assert proc.returncode == EXIT_DATA
    assert "hypothesis file not found" in proc.stderr


# ---------------------------------------------------------------- exit codes


def test_config_errors_exit_2(work, tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[decode]\nbeam_asr=0\n")
    ckpt, test = work / "m.ckpt", work / "data" / "test.mdds"
    assert run("decode", "--config", bad, "--checkpoint", ckpt, "--data", test, "--out", tmp_path / "h") == EXIT_CONFIG
    assert run("decode", "--checkpoint", ckpt, "--data", test, "--out", tmp_path / "h", "--lm-weight", "0.2") == EXIT_CONFIG
    assert run("decode", "--checkpoint", ckpt, "--data", test, "--out", tmp_path / "h", "--lm", work / "lm.ckpt") == EXIT_CONFIG
    assert run("gen-data", "--config", tmp_path / "missing.ini", "--out", tmp_path) == EXIT_CONFIG
    bad.write_text("[model]\narch=transformer\n")
    assert run("train", "--config", bad, "--data", work / "data", "--out", tmp_path / "x.ckpt") == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_data_errors_exit_3(work, tmp_path, capsys):
    test = work / "data" / "test.mdds"
    assert run("decode", "--checkpoint", tmp_path / "none.ckpt", "--data", test, "--out", tmp_path / "h") == EXIT_DATA
    assert run("decode", "--checkpoint", work / "m.ckpt", "--data", test, "--out", tmp_path / "h",
               "--arch", "baseline") == EXIT_DATA
    broken = tmp_path / "broken.mdds"
    raw = bytearray(test.read_bytes())
    raw[100] ^= 0xFF
    broken.write_bytes(bytes(raw))
    assert run("eval", "--hyps", tmp_path / "h", "--data", broken) == EXIT_DATA
    # a dataset with other vocabularies than the checkpoint
    other = tmp_path / "other"
    (tmp_path / "o.ini").write_text("[task]\nn_content=5\nfeat_dim=3\nn_train=4\nn_dev=2\nn_test=2\n")
    assert run("gen-data", "--config", tmp_path / "o.ini", "--out", other) == EXIT_OK
    assert run("decode", "--checkpoint", work / "m.ckpt", "--data", other / "test.mdds", "--out", tmp_path / "h") == EXIT_DATA
    err = capsys.readouterr().err
    assert "checksum" in err and "do not match the checkpoint" in err


def test_eval_id_mismatch_exit_3(work, tmp_path, capsys):
    hyps = tmp_path / "h.tsv"
    assert run("decode", "--checkpoint", work / "m.ckpt", "--data", work / "data" / "test.mdds", "--out", hyps,
               "--beam-asr", "1", "--beam-st", "1") == EXIT_OK
    capsys.readouterr()
    assert run("eval", "--hyps", hyps, "--data", work / "data" / "dev.mdds") == EXIT_DATA
    assert "utterance ids differ" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_4(work, tmp_path, capsys):
    cfg = tmp_path / "hot.ini"
    cfg.write_text(TINY.replace("warmup=10", "warmup=1\nlr_factor=1e12"))
    code = run("train", "--config", cfg, "--data", work / "data", "--out", tmp_path / "x.ckpt")
    assert code == EXIT_DIVERGED
    assert "non-finite training loss" in capsys.readouterr().err


def test_train_limit_and_overrides(work, tmp_path):
    out = tmp_path / "b.ckpt"
    assert run("train", "--config", work / "tiny.ini", "--data", work / "data", "--out", out, "--arch", "baseline",
               "--epochs", "1", "--limit", "8", "--seed", "3", "--log", tmp_path / "b.tsv") == EXIT_OK
    log = (tmp_path / "b.tsv").read_text()
    assert "# [model] arch=baseline" in log and "# [train] epochs=1" in log and "# [train] seed=3" in log
    assert len([l for l in log.splitlines() if not l.startswith("#")]) == 2


def test_default_config_split_sizes(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path) == EXIT_OK
    out = capsys.readouterr().out
    sizes = {line.split("\t")[0]: line.split("\t")[1] for line in out.splitlines()}
    assert sizes == {"train": "utterances=2000", "dev": "utterances=200", "test": "utterances=200"}
    assert "seed=0" in (tmp_path / "config.ini").read_text()


def test_smoke_training_writes_loadable_checkpoint(work, tmp_path):
    out = tmp_path / "smoke.ckpt"
    (tmp_path / "data").mkdir()
    spec, train = read_dataset(work / "data" / "train.mdds")
    _, dev = read_dataset(work / "data" / "dev.mdds")
    write_dataset(tmp_path / "data" / "train.mdds", (train * 2)[:32], spec)
    write_dataset(tmp_path / "data" / "dev.mdds", dev, spec)
    assert run("train", "--config", work / "tiny.ini", "--data", tmp_path / "data", "--out", out, "--epochs", "1",
               "--arch", "multidec_sa") == EXIT_OK
    model = load_checkpoint(out, expect_arch="multidec_sa")
    assert model.config.d == 8
    rows = parse_log((tmp_path / "smoke.log.tsv").read_text())
    assert len(rows) == 1 and rows[0]["step"] == 4
    for name in ("gn_enc_asr", "gn_ctc", "gn_dec_asr", "gn_enc_st", "gn_dec_st"):
        assert rows[0][name] > 0, name


def test_beam_one_decode_matches_greedy(work, tmp_path):
    hyps = tmp_path / "b1.tsv"
    assert run("decode", "--checkpoint", work / "m.ckpt", "--data", work / "data" / "test.mdds", "--out", hyps,
               "--beam-asr", "1", "--beam-st", "1", "--length-penalty-st", "0") == EXIT_OK
    rows = read_hypotheses(hyps)
    model = load_checkpoint(work / "m.ckpt")
    _, test = read_dataset(work / "data" / "test.mdds")
    for e in test:
        ref = greedy_pipeline(model, e.x)
        assert rows[e.uid]["y_b"] == list(ref.y_b)
        assert rows[e.uid]["y_c"] == list(ref.y_c)


def test_nbest_scores_dominate(work, tmp_path):
    for n in (1, 4):
        assert run("decode", "--checkpoint", work / "m.ckpt", "--data", work / "data" / "test.mdds",
                   "--out", tmp_path / f"n{n}.tsv", "--nbest", n) == EXIT_OK
    one, four = read_hypotheses(tmp_path / "n1.tsv"), read_hypotheses(tmp_path / "n4.tsv")
    assert all(four[u]["score"] >= one[u]["score"] for u in one)
