"""Command line entry point.

Exit codes: 0 success, 1 usage or config error, 2 iteration failure in
strict mode, 3 IO or integrity error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, FrameworkConfig, load_config
from .dsl import DSLError, parse_program, pretty_print, validate_program
from .envs import TRAINING_SCHEMA
from .eval_select import homomorphic_eval, render_grid
from .llm import GenerationError, PromptBudgetError, assemble_prompt, generate_candidates
from .orchestrator import IntegrityError, IterationFailure, make_backend, report, resume, run_loop
from .policy import load_policy
from .policy.gradcheck import run_suite
from .policy.train import eval_grid
from .rewards import human_reward

EXIT_OK, EXIT_USAGE, EXIT_STRICT, EXIT_IO = 0, 1, 2, 3
STAGE_NAMES = {"train": "train", "gazebo": "gazebo_like", "real": "real_like"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rewardloop", description="Generate, train, evaluate and refine reward programs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run the loop (or continue one with --resume)")
    run.add_argument("--config", type=Path)
    run.add_argument("--resume", type=Path, metavar="RUN_DIR")
    run.add_argument("--run-dir", type=Path, help="output directory (default runs/<timestamp>)")
    run.add_argument("--strict-alg1", action="store_true", help="reference becomes each iteration's best")
    run.add_argument("--backend", choices=("mock", "http"))
    run.add_argument("--seed", type=int)

    rep = sub.add_parser("report", help="summarise a run directory")
    rep.add_argument("run_dir", type=Path)
    rep.add_argument("--out", type=Path)

    gen = sub.add_parser("gen", help="assemble the prompt and generate candidates only")
    gen.add_argument("--config", type=Path, required=True)
    gen.add_argument("--dry-run", action="store_true", required=True)
    gen.add_argument("--backend", choices=("mock", "http"))

    gc = sub.add_parser("gradcheck", help="finite-difference check of the PPO loss gradient")
    gc.add_argument("--batches", type=int, default=10)
    gc.add_argument("--seed", type=int, default=0)

    ev = sub.add_parser("eval", help="evaluate a policy checkpoint in one stage")
    ev.add_argument("--policy", type=Path, required=True)
    ev.add_argument("--stage", choices=tuple(STAGE_NAMES), required=True)
    ev.add_argument("--program", type=Path, help="reward program (default: the built-in human reward)")
    ev.add_argument("--config", type=Path)
    ev.add_argument("--json", action="store_true", help="print the full report as JSON")
    return p


def _config(path: Path | None) -> FrameworkConfig:
    if path is None:
        return FrameworkConfig()
    cfg = load_config(path)
    if cfg.reference_program is not None:
        # snapshot an absolute path so resumed runs find it from anywhere
        ref = (path.parent / cfg.reference_program).resolve()
        cfg = cfg.model_copy(update={"reference_program": str(ref)})
        cfg.load_reference()
    return cfg


def _overrides(cfg: FrameworkConfig, args) -> FrameworkConfig:
    doc = cfg.model_dump()
    if getattr(args, "strict_alg1", False):
        doc["strict_alg1"] = True
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "backend", None) is not None:
        doc["backend"]["kind"] = args.backend
    return FrameworkConfig.model_validate(doc)


def cmd_run(args) -> int:
    if args.resume is not None:
        if args.config is not None or args.strict_alg1 or args.backend or args.seed is not None:
            raise UsageError("--resume takes its settings from the run directory; drop the other options")
        record = resume(args.resume)
    else:
        cfg = _overrides(_config(args.config), args)
        run_dir = args.run_dir or Path("runs") / time.strftime("%Y%m%d-%H%M%S")
        record = run_loop(cfg, run_dir)
    print(report(record.run_dir), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    print(report(args.run_dir, args.out), end="")
    return EXIT_OK


def cmd_gen(args) -> int:
    cfg = _overrides(_config(args.config), args)
    rules = [r.text() for r in cfg.safety_rules()]
    bundle = assemble_prompt(
        cfg.task, cfg.environment_description, TRAINING_SCHEMA, rules, cfg.load_reference(),
        None, cfg.generation.token_budget,
    )
    print(f"prompt digest {bundle.digest()} | ~{bundle.tokens()} tokens")
    g = cfg.generation
    sources, stats = generate_candidates(
        make_backend(cfg), bundle, cfg.candidates, TRAINING_SCHEMA, g.max_retries, g.temperature, (0,), g.workers
    )
    for s in sources:
        print(f"--- candidate {s.slot} (attempts {s.attempt_index + 1})")
        print(s.diagnostic if s.program is None else pretty_print(s.program).rstrip("\n"))
    print(
        f"requested {stats.requested} | parsed {stats.parsed_ok} | validated {stats.validated_ok} | "
        f"retries {stats.retries_used} | repaired {stats.repaired}"
    )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(n_batches=args.batches, seed=args.seed)
    for k, r in enumerate(results):
        status = "pass" if r.passed else "FAIL"
        print(f"batch {k // 2} beta {r.beta:g}: max rel error {r.max_rel_error:.2e} ({r.worst_param}) {status}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_STRICT


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    params = load_policy(args.policy)
    if args.program is not None:
        program = parse_program(args.program.read_text())
        report_ = validate_program(program, TRAINING_SCHEMA)
        if not report_.ok:
            raise ConfigError(f"program does not validate:\n{report_}")
    else:
        program = human_reward()
    stage = STAGE_NAMES[args.stage]
    env = {
        "train": replace(cfg.training_env(), randomize={}, init_noise=0.0),
        "gazebo_like": cfg.gazebo_env(),
        "real_like": cfg.real_env(),
    }[stage]
    seeds, cmds = eval_grid(cfg.ppo.build())
    f = None if stage == "train" else cfg.homomorphism_map()
    rep = homomorphic_eval(params, program, env, f, seeds, cmds, stage, cfg.weights())
    if args.json:
        print(rep.to_json(), end="")
        return EXIT_OK
    print(render_grid({stage: rep}, "term_sums"))
    print(
        f"survival {rep.survival_time:.2f} s | velocity error {rep.velocity_error:.2f} m/s | "
        f"max |pitch| {rep.max_abs_pitch:.2f} rad | max |torque| {rep.max_abs_torque:.2f} N*m | "
        f"score {rep.criterion_score:.2f}"
    )
    if rep.failed:
        print(rep.diagnostic)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "report": cmd_report, "gen": cmd_gen, "gradcheck": cmd_gradcheck, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, DSLError, PromptBudgetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IterationFailure as exc:
        print(f"iteration failed: {exc}", file=sys.stderr)
        return EXIT_STRICT
    except GenerationError as exc:
        print(f"generation failed: {exc}", file=sys.stderr)
        return EXIT_STRICT
    except (IntegrityError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
