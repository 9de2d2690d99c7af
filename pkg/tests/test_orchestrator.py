from __future__ import annotations

import json
import socket
from pathlib import Path

import pytest
import yaml

from rewardloop.cli import main
from rewardloop.config import ConfigError, FrameworkConfig, load_config, parse_config, save_config
from rewardloop.envs import OBS_DIM
from rewardloop.llm import BackendError, MockBackend
from rewardloop.orchestrator import (
    MANIFEST,
    IntegrityError,
    IterationFailure,
    RunStore,
    make_backend,
    report,
    resume,
    run_loop,
)
from rewardloop.policy import PolicyParams
from rewardloop.policy.network import dump_policy

TINY = {
    "iters": 8,
    "n_envs": 4,
    "n_steps": 32,
    "minibatch": 64,
    "epochs": 2,
    "hidden": [16, 16],
    "eval_seeds": [0],
    "eval_commands": [0.5],
}


def tiny(**kw) -> FrameworkConfig:
    doc = {"iterations": 2, "candidates": 3, "ppo": dict(TINY)}
    for k, v in kw.items():
        if k == "ppo":
            doc["ppo"].update(v)
        else:
            doc[k] = v
    return FrameworkConfig.model_validate(doc)


class Interrupt(Exception):
    pass


def stop_after(event: str, **match):
    def hook(name, **kw):
        if name == event and all(kw.get(k) == v for k, v in match.items()):
            raise Interrupt(f"{name} {kw}")

    return hook


def snapshot(run_dir: Path) -> dict[str, bytes]:
    """Every file except the manifest's creation time."""
    out = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == MANIFEST:
                doc = json.loads(data)
                doc.pop("created", None)
                data = json.dumps(doc, sort_keys=True).encode()
            out[str(p.relative_to(run_dir))] = data
    return out


class Broken:
    backend_id = "down"

    def complete(self, messages, temperature, key):
        raise BackendError("connection refused")


# config


def test_config_defaults_are_valid():
    cfg = FrameworkConfig()
    assert cfg.iterations >= 1 and cfg.candidates >= 1 and 0 < cfg.c_bs <= 1 and cfg.beta >= 0


def test_config_round_trip(tmp_path):
    cfg = tiny(beta=2.5, safety=[{"name": "torque", "metric": "max_abs_torque", "limit": 2.0}])
    save_config(cfg, tmp_path / "a.yaml")
    back = load_config(tmp_path / "a.yaml")
    assert back == cfg
    save_config(back, tmp_path / "b.yaml")
    assert (tmp_path / "a.yaml").read_text() == (tmp_path / "b.yaml").read_text()


@pytest.mark.parametrize(
    "text",
    [
        "iterations: 0",
        "candidates: 0",
        "c_bs: 0",
        "c_bs: 1.5",
        "beta: -1",
        "bogus: 1",
        "ppo: {bogus: 1}",
        "envs: {training: {physics: {bogus: 1.0}}}",
        "safety: [{name: a, metric: bogus, limit: 1}]",
        "criterion: {c_obs: {bogus: 1.0}}",
        "homomorphism: {pitch: bogus}",
        "homomorphism: {pitch: {gain: 2.0}}",
        "- a list",
        "a: [unclosed",
    ],
)
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_env_overrides_apply():
    cfg = parse_config("envs: {training: {physics: {mass: 2.0}, t_max: 1.0}, gazebo_like: {delay_steps: 0}}")
    assert cfg.training_env().nominal.mass == 2.0 and cfg.training_env().t_max == 1.0
    assert cfg.gazebo_env().delay_steps == 0
    assert cfg.real_env().delay_steps == FrameworkConfig().real_env().delay_steps


def test_missing_reference_program(tmp_path):
    cfg = tiny(reference_program="nope.txt")
    with pytest.raises(ConfigError, match="cannot read"):
        cfg.load_reference(tmp_path)


def test_make_backend_mock():
    b = make_backend(tiny(seed=4, backend={"fault_rate": 0.25}))
    assert isinstance(b, MockBackend)


# run loop


def test_smoke_single_iteration(tmp_path):
    cfg = tiny(iterations=1, candidates=4, ppo={"iters": 20})
    rec = run_loop(cfg, tmp_path / "run")
    assert rec.complete and rec.best is not None
    final = tmp_path / "run" / "final"
    for name in ("best_program.txt", "best_policy.json", "best_reports.json", "summary.json"):
        assert (final / name).exists()
    it = json.loads((tmp_path / "run" / "iter_000" / "iteration.json").read_text())
    assert it["status"] == "ok" and len(it["candidates"]) == 4
    assert len(it["selected"]) == 1  # ceil(0.15 * 4)
    assert RunStore(tmp_path / "run").verify() == []


def test_run_layout(tmp_path):
    run_loop(tiny(iterations=1), tmp_path / "run")
    d = tmp_path / "run" / "iter_000"
    assert (tmp_path / "run" / "config.yaml").exists()
    assert (d / "prompts" / "prompt.json").exists()
    assert (d / "candidates" / "generation.json").exists()
    assert sorted(p.name for p in (d / "candidates").glob("cand_*.txt")) == ["cand_00.txt", "cand_01.txt", "cand_02.txt"]
    assert len(list((d / "policies").glob("*.json"))) == 3
    assert len(list((d / "metrics").glob("*.csv"))) == 3
    assert (d / "feedback.txt").read_text()
    sel = json.loads((d / "iteration.json").read_text())["selected"][0]
    assert (d / "evals" / f"cand_{sel:02d}_gazebo_like.json").exists()
    assert (d / "evals" / f"cand_{sel:02d}_safety.json").exists()


def test_best_so_far_is_non_decreasing(tmp_path):
    rec = run_loop(tiny(iterations=3, candidates=4), tmp_path / "run")
    crit = rec.best_criteria()
    assert all(c is not None for c in crit)
    assert all(b >= a for a, b in zip(crit, crit[1:]))


def test_second_iteration_prompt_carries_best_program(tmp_path):
    run_loop(tiny(iterations=2), tmp_path / "run")
    best = json.loads((tmp_path / "run" / "iter_000" / "iteration.json").read_text())["best"]
    prompt = json.loads((tmp_path / "run" / "iter_001" / "prompts" / "prompt.json").read_text())
    user = prompt["messages"][-1]["content"]
    assert best["program"].splitlines()[0] in user


def test_run_is_deterministic(tmp_path):
    run_loop(tiny(), tmp_path / "a")
    run_loop(tiny(), tmp_path / "b")
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")


def test_different_seed_changes_run(tmp_path):
    run_loop(tiny(iterations=1), tmp_path / "a")
    run_loop(tiny(iterations=1, seed=1), tmp_path / "b")
    assert snapshot(tmp_path / "a") != snapshot(tmp_path / "b")


def test_workers_do_not_change_outputs(tmp_path):
    run_loop(tiny(iterations=1), tmp_path / "a")
    run_loop(tiny(iterations=1, workers=2), tmp_path / "b")
    sa, sb = snapshot(tmp_path / "a"), snapshot(tmp_path / "b")
    sa.pop("config.yaml"), sb.pop("config.yaml")
    sa.pop(MANIFEST), sb.pop(MANIFEST)
    assert sa == sb


def test_existing_run_dir_refused(tmp_path):
    run_loop(tiny(iterations=1), tmp_path / "run")
    with pytest.raises(IntegrityError):
        run_loop(tiny(iterations=1), tmp_path / "run")


def test_mock_run_opens_no_sockets(tmp_path, monkeypatch):
    def refuse(*a, **k):
        raise AssertionError("network access attempted")

    monkeypatch.setattr(socket, "socket", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)
    assert run_loop(tiny(iterations=1), tmp_path / "run").complete


def test_generation_failure_marks_iteration_and_continues(tmp_path):
    rec = run_loop(tiny(), tmp_path / "run", backend=Broken())
    assert [it["status"] for it in rec.iterations] == ["failed", "failed"]
    assert "connection refused" in rec.iterations[0]["diagnostic"]
    assert rec.best is None
    summary = json.loads((tmp_path / "run" / "final" / "summary.json").read_text())
    assert summary["status"] == "no candidate survived"


def test_strict_mode_raises_on_failed_iteration(tmp_path):
    with pytest.raises(IterationFailure):
        run_loop(tiny(strict_alg1=True), tmp_path / "run", backend=Broken())
    assert (tmp_path / "run" / "iter_000" / "iteration.json").exists()


def test_strict_mode_reference_is_iteration_best(tmp_path):
    rec = run_loop(tiny(iterations=3, strict_alg1=True), tmp_path / "run")
    for it in rec.iterations:
        assert it["best"] == it["iteration_best"]


# resume


def test_resume_after_iteration_matches_uninterrupted(tmp_path):
    cfg = tiny(iterations=3)
    run_loop(cfg, tmp_path / "full")
    with pytest.raises(Interrupt):
        run_loop(cfg, tmp_path / "cut", on_event=stop_after("iteration_done", iteration=0))
    assert not (tmp_path / "cut" / "iter_001" / "iteration.json").exists()
    rec = resume(tmp_path / "cut")
    assert rec.complete
    assert snapshot(tmp_path / "full") == snapshot(tmp_path / "cut")


def test_resume_after_candidate_retrains_only_missing(tmp_path):
    cfg = tiny(iterations=1, candidates=3)
    run_loop(cfg, tmp_path / "full")
    with pytest.raises(Interrupt):
        run_loop(cfg, tmp_path / "cut", on_event=stop_after("candidate_trained", iteration=0, index=1))
    trained = []
    rec = resume(tmp_path / "cut", on_event=lambda n, **kw: trained.append(kw["index"]) if n == "candidate_trained" else None)
    assert trained == [2]
    assert rec.complete
    assert snapshot(tmp_path / "full") == snapshot(tmp_path / "cut")


def test_resume_of_completed_run_is_noop(tmp_path):
    run_loop(tiny(iterations=1), tmp_path / "run")
    before = snapshot(tmp_path / "run")
    events = []
    rec = resume(tmp_path / "run", on_event=lambda n, **kw: events.append(n))
    assert events == [] and rec.complete
    assert snapshot(tmp_path / "run") == before


def test_resume_refuses_tampered_file(tmp_path):
    run_loop(tiny(iterations=1), tmp_path / "run")
    path = tmp_path / "run" / "iter_000" / "metrics" / "cand_00.csv"
    path.write_text(path.read_text() + "0,0,0\n")
    with pytest.raises(IntegrityError, match="modified  iter_000/metrics/cand_00.csv"):
        resume(tmp_path / "run")


def test_resume_refuses_missing_file(tmp_path):
    run_loop(tiny(iterations=1), tmp_path / "run")
    (tmp_path / "run" / "iter_000" / "feedback.txt").unlink()
    with pytest.raises(IntegrityError, match="missing   iter_000/feedback.txt"):
        resume(tmp_path / "run")


def test_resume_refuses_edited_config(tmp_path):
    run_loop(tiny(iterations=1), tmp_path / "run")
    cfg = tmp_path / "run" / "config.yaml"
    cfg.write_text(cfg.read_text().replace("iterations: 1", "iterations: 2"))
    with pytest.raises(IntegrityError):
        resume(tmp_path / "run")


def test_resume_without_manifest(tmp_path):
    with pytest.raises(IntegrityError):
        resume(tmp_path)


# report


def test_report_rows_and_csvs(tmp_path):
    run_loop(tiny(iterations=2), tmp_path / "run")
    text = report(tmp_path / "run")
    assert text.count("iteration ") >= 2 and "best: iteration" in text
    out = tmp_path / "run" / "report"
    rows = (out / "iterations.csv").read_text().splitlines()
    assert rows[0].startswith("iteration,status") and len(rows) == 3
    assert all(r.split(",")[1] == "ok" for r in rows[1:])
    curves = (out / "curves.csv").read_text().splitlines()
    assert len(curves) == 1 + 2 * 3 * TINY["iters"]
    assert len((out / "generation.csv").read_text().splitlines()) == 3
    assert (out / "grid_iter_000.csv").exists() and (out / "summary.txt").read_text() == text


def test_report_marks_incomplete(tmp_path):
    with pytest.raises(Interrupt):
        run_loop(tiny(iterations=2), tmp_path / "run", on_event=stop_after("iteration_done", iteration=0))
    text = report(tmp_path / "run", tmp_path / "out")
    assert "iteration 1: incomplete" in text and "run incomplete" in text
    rows = (tmp_path / "out" / "iterations.csv").read_text().splitlines()
    assert rows[2].startswith("1,incomplete")


def test_report_marks_failed_iteration(tmp_path):
    run_loop(tiny(iterations=1), tmp_path / "run", backend=Broken())
    text = report(tmp_path / "run")
    assert "iteration 0: failed: generation failed:" in text and "connection refused" in text
    row = (tmp_path / "run" / "report" / "iterations.csv").read_text().splitlines()[1]
    assert row.startswith("0,failed") and "connection refused" in row


# CLI


def write_cfg(tmp_path: Path, **kw) -> Path:
    path = tmp_path / "cfg.yaml"
    save_config(tiny(**kw), path)
    return path


def test_cli_run_report_and_resume(tmp_path, capsys):
    path = write_cfg(tmp_path, iterations=1)
    assert main(["run", "--config", str(path), "--run-dir", str(tmp_path / "run")]) == 0
    out = capsys.readouterr().out
    assert "iteration 0: ok" in out
    assert main(["report", str(tmp_path / "run")]) == 0
    assert capsys.readouterr().out == out
    assert main(["run", "--resume", str(tmp_path / "run")]) == 0
    assert capsys.readouterr().out == out


def test_cli_overrides_are_snapshotted(tmp_path):
    path = write_cfg(tmp_path, iterations=1)
    assert main(["run", "--config", str(path), "--run-dir", str(tmp_path / "run"), "--seed", "7", "--strict-alg1"]) == 0
    snap = yaml.safe_load((tmp_path / "run" / "config.yaml").read_text())
    assert snap["seed"] == 7 and snap["strict_alg1"] is True


def test_cli_usage_errors(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("bogus: 1\n")
    assert main(["run", "--config", str(bad)]) == 1
    assert main(["run", "--resume", str(tmp_path), "--seed", "1"]) == 1
    assert main(["nope"]) == 1
    assert main(["eval", "--policy", "x"]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_strict_failure_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr("rewardloop.orchestrator.make_backend", lambda cfg: Broken())
    path = write_cfg(tmp_path, iterations=1)
    assert main(["run", "--config", str(path), "--run-dir", str(tmp_path / "a"), "--strict-alg1"]) == 2
    # without strict mode the failure is recorded and the run completes
    assert main(["run", "--config", str(path), "--run-dir", str(tmp_path / "b")]) == 0


def test_cli_integrity_exit_code(tmp_path, capsys):
    path = write_cfg(tmp_path, iterations=1)
    assert main(["run", "--config", str(path), "--run-dir", str(tmp_path / "run")]) == 0
    (tmp_path / "run" / "iter_000" / "metrics" / "cand_00.csv").write_text("tampered\n")
    capsys.readouterr()
    assert main(["run", "--resume", str(tmp_path / "run")]) == 3
    assert "modified  iter_000/metrics/cand_00.csv" in capsys.readouterr().err
    assert main(["report", str(tmp_path / "nowhere")]) == 3


def test_cli_gen_dry_run(tmp_path, capsys):
    path = write_cfg(tmp_path, candidates=2)
    assert main(["gen", "--config", str(path), "--dry-run"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("prompt digest ") and "--- candidate 1" in out
    assert "requested 2 | parsed 2 | validated 2" in out


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--batches", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 and all(line.endswith("pass") for line in lines)


def test_cli_eval(tmp_path, capsys):
    ckpt = tmp_path / "p.json"
    ckpt.write_text(dump_policy(PolicyParams.init(OBS_DIM, 1, (16, 16), seed=0)))
    path = write_cfg(tmp_path)
    assert main(["eval", "--policy", str(ckpt), "--stage", "gazebo", "--config", str(path)]) == 0
    out = capsys.readouterr().out
    assert "Track lin vel | gym n/a | gazebo " in out and "max |pitch|" in out
    assert main(["eval", "--policy", str(ckpt), "--stage", "train", "--config", str(path), "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["stage"] == "train"
    prog = tmp_path / "bad.txt"
    prog.write_text("x: foot_height\n")
    assert main(["eval", "--policy", str(ckpt), "--stage", "real", "--program", str(prog)]) == 1
