import json

import pytest

from supernet_sampler.cli import build_parser, main, resolve_config

FAST = ["--n-instances", "12", "--n-eval", "6", "--hidden", "8", "--bc-steps", "6",
        "--cpr-steps", "2", "--rl-episodes", "4", "--bc-batch", "8", "--cpr-k", "2",
        "--entropy-rollouts", "1", "--seeds", "0"]


def test_overrides_resolve():
    args = build_parser().parse_args(["train", "--lam", "0.3", "--lambda-grid", "0,0.1",
                                      "--allow-early-exit", "false", "--n-instances", "5"])
    cfg = resolve_config(args)
    assert cfg.training.lam == 0.3 and cfg.lambda_grid == (0.0, 0.1)
    assert cfg.allow_early_exit is False and cfg.suite.n_instances == 5


def test_config_file_then_flags(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"training": {"lam": 0.2, "hidden": 4}}))
    args = build_parser().parse_args(["train", "--config", str(tmp_path / "c.json"), "--hidden", "6"])
    cfg = resolve_config(args)
    assert cfg.training.lam == 0.2 and cfg.training.hidden == 6


@pytest.mark.parametrize("argv", [["train", "--lam", "abc"], ["train", "--allow-early-exit", "maybe"],
                                  ["train", "--sweep-mode", "x"], ["eval"],
                                  ["train", "--config", "/missing.json"]])
def test_config_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "config error" in capsys.readouterr().err


def test_end_to_end(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["gen-suite", "--out", str(tmp_path / "s.jsonl"), *FAST]) == 0
    assert len((tmp_path / "s.jsonl").read_text().splitlines()) == 12
    assert main(["train", "--output-dir", str(out), *FAST]) == 0
    assert (out / "final.ckpt").exists() and (out / "config.json").exists()
    ckpt = str(out / "final.ckpt")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", ckpt, "--output-dir", str(out), *FAST]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["n"] == 6
    assert main(["eval", "--expert", "--output-dir", str(tmp_path / "e"), *FAST]) == 0
    assert json.loads(capsys.readouterr().out)["accuracy"] == 1.0
    traces = tmp_path / "t.jsonl"
    assert main(["infer", "--checkpoint", ckpt, "-n", "3", "--trace", str(traces), *FAST]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 3
    assert main(["trace-verify", "--checkpoint", ckpt, "--traces", str(traces), *FAST]) == 0
    assert "failures=0" in capsys.readouterr().out
    lines = traces.read_text().splitlines()
    step = json.loads(lines[1])
    step["probs"][0] += 1e-3
    lines[1] = json.dumps(step)
    traces.write_text("\n".join(lines) + "\n")
    assert main(["trace-verify", "--checkpoint", ckpt, "--traces", str(traces), *FAST]) == 1


def test_resume_and_sweep_and_ablate(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--output-dir", str(out), *FAST]) == 0
    assert main(["train", "--output-dir", str(tmp_path / "r"), "--resume",
                 str(out / "phase_cpr.ckpt"), *FAST]) == 0
    assert (out / "final.ckpt").read_bytes() == (tmp_path / "r" / "final.ckpt").read_bytes()
    capsys.readouterr()
    assert main(["sweep", "--lambda-grid", "0,0.3", "--output-dir", str(tmp_path / "s"), *FAST]) == 0
    assert capsys.readouterr().out.count("lambda=") == 2
    assert main(["ablate", "--variants", "no_path_rank", "--output-dir", str(tmp_path / "a"), *FAST]) == 0
    assert "no_path_rank" in capsys.readouterr().out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(tmp_path, capsys):
    assert main(["train", "--output-dir", str(tmp_path), "--lr-bc", "1e308", "--bc-steps", "3",
                 *FAST[:2], "--skip", "cpr,rl", "--hidden", "4"]) == 3
    assert "diverged" in capsys.readouterr().err
