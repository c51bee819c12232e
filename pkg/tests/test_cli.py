import hashlib
import json

import pytest

from ixgrpo.cli import EXIT_INPUT, EXIT_JUDGE, EXIT_OK, main
from ixgrpo.config import RunConfig, dump_config, load_config, parse_config
from ixgrpo.errors import ConfigError
from ixgrpo.flowcore import flat_params, load_checkpoint

SMALL = [
    "--set", "scenegen.resolution=16",
    "--set", "arch.widths=8, 8",
    "--set", "arch.dilations=1, 1",
    "--set", "pretrain.steps=6",
    "--set", "pretrain.batch_size=4",
    "--set", "pretrain.checkpoint_every=3",
    "--set", "grpo.group_size=2",
    "--set", "grpo.steps=3",
    "--set", "grpo.n_pairs=8",
    "--set", "grpo.epochs=1",
    "--set", "eval.steps=3",
    "--set", "eval.n_pairs=8",
    "--set", "eval.whdr_pairs=20",
]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--count", "4", "--out", str(d / "train.ixds"), *SMALL]) == EXIT_OK
    assert main(["gen", "--count", "2", "--seed", "7", "--out", str(d / "test.ixds"), *SMALL]) == EXIT_OK
    assert main(["pretrain", "--data", str(d / "train.ixds"), "--out", str(d / "pre.ixck"), *SMALL]) == EXIT_OK
    return d


def test_config_example_is_the_default(tmp_path):
    import pathlib

    example = pathlib.Path(__file__).parent.parent / "config.example"
    assert load_config(example) == RunConfig()
    assert parse_config(dump_config(RunConfig())) == RunConfig()


def test_config_rejects_unknown_names():
    with pytest.raises(ConfigError):
        parse_config("[grpo]\nbetta = 0\n")
    with pytest.raises(ConfigError):
        parse_config("[nope]\n")
    cfg = parse_config("[judge]\nkind = noisy\nflip_prob = depth:0.04, albedo:0.1\n")
    assert cfg.judge.flip_prob == {"depth": 0.04, "albedo": 0.1}


def test_input_errors_exit_2(tmp_path, workspace):
    bad = tmp_path / "bad.ini"
    bad.write_text("[grpo]\nbetta = 0\n")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "x.ixds")]) == EXIT_INPUT
    assert main(["gen", "--count", "0", "--out", str(tmp_path / "x.ixds")]) == EXIT_INPUT
    assert main(["gen", "--set", "scenegen.resolution=abc", "--out", str(tmp_path / "x.ixds")]) == EXIT_INPUT
    junk = tmp_path / "junk.ixck"
    junk.write_bytes(b"not a checkpoint")
    args = ["--data", str(workspace / "train.ixds"), "--out", str(tmp_path / "o.ixck")]
    assert main(["grpo", "--checkpoint", str(junk), *args]) == EXIT_INPUT
    assert main(["pretrain", "--data", str(tmp_path / "missing.ixds"), "--out", str(tmp_path / "p.ixck")]) == EXIT_INPUT


def test_external_judge_failure_exits_3(tmp_path, workspace):
    args = ["grpo", "--checkpoint", str(workspace / "pre.ixck"), "--data", str(workspace / "train.ixds")]
    args += ["--out", str(tmp_path / "g.ixck"), "--judge", "external", "--set", "judge.command=/no/such/judge", *SMALL]
    assert main(args) == EXIT_JUDGE


def test_gen_and_pretrain_are_deterministic(tmp_path, workspace):
    assert main(["gen", "--count", "4", "--out", str(tmp_path / "a.ixds"), *SMALL]) == EXIT_OK
    assert sha(tmp_path / "a.ixds") == sha(workspace / "train.ixds")
    assert main(["pretrain", "--data", str(tmp_path / "a.ixds"), "--out", str(tmp_path / "p.ixck"), *SMALL]) == EXIT_OK
    assert sha(tmp_path / "p.ixck") == sha(workspace / "pre.ixck")


def test_pretrain_resume_matches_full_run(tmp_path, workspace):
    data = str(workspace / "train.ixds")
    out = tmp_path / "r.ixck"
    assert main(["pretrain", "--data", data, "--out", str(out), "--stop-after", "3", *SMALL]) == EXIT_OK
    assert load_checkpoint(out).step == 3
    assert main(["pretrain", "--data", data, "--out", str(out), "--resume", str(out), *SMALL]) == EXIT_OK
    assert sha(out) == sha(workspace / "pre.ixck")
    rows = (tmp_path / "r.ixck.loss.csv").read_text().splitlines()
    assert rows[0] == "step,loss" and len(rows) == 7


def _grpo(ws, out, *extra):
    args = ["grpo", "--checkpoint", str(ws / "pre.ixck"), "--data", str(ws / "train.ixds"), "--out", str(out)]
    return main([*args, *SMALL, *extra])


def test_grpo_is_deterministic_and_logs(tmp_path, workspace):
    assert _grpo(workspace, tmp_path / "a.ixck") == EXIT_OK
    assert _grpo(workspace, tmp_path / "b.ixck") == EXIT_OK
    assert flat_params(load_checkpoint(tmp_path / "a.ixck").net()).equal(flat_params(load_checkpoint(tmp_path / "b.ixck").net()))
    assert sha(tmp_path / "a.ixck.metrics.ndjson") == sha(tmp_path / "b.ixck.metrics.ndjson")
    lines = (tmp_path / "a.ixck.metrics.ndjson").read_text().splitlines()
    assert len(lines) == 4
    assert {"step", "modality", "rewards", "kl", "skipped"} <= set(json.loads(lines[0]))
    meta = load_checkpoint(tmp_path / "a.ixck").meta
    assert meta["phase"] == "grpo" and "[grpo]" in meta["config"]


def test_grpo_variants(tmp_path, workspace):
    assert _grpo(workspace, tmp_path / "dn.ixck", "--reward", "dn") == EXIT_OK
    assert _grpo(workspace, tmp_path / "noisy.ixck", "--judge", "noisy", "--set", "judge.flip_prob=depth:0.2") == EXIT_OK
    il = ["--beta", "0", "--interleave", "--synthetic", str(workspace / "train.ixds")]
    assert _grpo(workspace, tmp_path / "il.ixck", *il) == EXIT_OK
    assert _grpo(workspace, tmp_path / "x.ixck", "--interleave") == EXIT_INPUT


def test_eval_and_report(tmp_path, workspace, capsys):
    out = tmp_path / "ev"
    args = ["eval", "--pre", str(workspace / "pre.ixck"), "--data", str(workspace / "test.ixds"), "--out-dir", str(out)]
    assert main([*args, *SMALL]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    for m, v in report["rewards"].items():
        assert v["pre"] == v["post"] or (v["pre"] != v["pre"])  # equal or both NaN
    assert (out / "rows.csv").exists()
    assert _grpo(workspace, tmp_path / "g.ixck") == EXIT_OK
    capsys.readouterr()
    assert main(["report", str(out / "report.json"), str(tmp_path / "g.ixck.metrics.ndjson")]) == EXIT_OK
    text = capsys.readouterr().out
    assert "reward/depth" in text and "steps" in text
    assert main(["report", str(tmp_path / "nothing.json")]) == EXIT_INPUT
