"""Closed generate -> train -> select -> evaluate -> feedback loop with a resumable run record.

Run directory layout::

    manifest.json          sha256 of every completed artifact, plus the config hash
    config.yaml            config snapshot
    iter_000/
      prompts/prompt.json  messages, digest and token estimate
      candidates/          cand_XX.txt (program or raw reply) and generation.json
      policies/            cand_XX.json checkpoints
      metrics/             cand_XX.csv training curves and cand_XX.json final metrics
      evals/               cand_XX_<stage>.json reports and cand_XX_safety.json
      feedback.txt
      iteration.json       written last; its presence marks the iteration complete
    final/                 best program, policy and deployment reports

An artifact counts as complete only once its hash is in the manifest, so a
crash between writing a file and recording it simply redoes that step.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from . import seeding
from .config import FrameworkConfig, parse_config
from .dsl import RewardProgram, parse_program, pretty_print
from .envs import TRAINING_SCHEMA
from .eval_select import (
    STAGES,
    CandidateRecord,
    EvalReport,
    FinalEntry,
    SafetyVerdict,
    SelectionError,
    compile_feedback,
    fmt2,
    grid_csv,
    homomorphic_eval,
    render_grid,
    safety_check,
    select_best,
    select_final,
    train_criterion,
)
from .llm import (
    CandidateSource,
    ChatCompletionBackend,
    GenerationError,
    GenerationStats,
    MockBackend,
    PromptBudgetError,
    assemble_prompt,
    generate_candidates,
)
from .policy import PolicyParams, TeacherPolicy, TrainingFailed, TrainMetrics, load_policy, train_candidate
from .policy.network import dump_policy
from .policy.train import eval_grid

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CONFIG = "config.yaml"
EventHook = Callable[..., None]


class IntegrityError(Exception):
    """The run directory disagrees with its manifest."""


class IterationFailure(Exception):
    """An iteration failed while running in strict mode."""


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class RunStore:
    """Single writer of a run directory; every write is atomic and hashed."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.manifest: dict = {"format": 1, "config_sha256": "", "files": {}}
        path = self.root / MANIFEST
        if path.exists():
            self.manifest = json.loads(path.read_text())

    @property
    def files(self) -> dict[str, str]:
        return self.manifest["files"]

    def has(self, rel: str) -> bool:
        return rel in self.files

    def path(self, rel: str) -> Path:
        return self.root / rel

    def _atomic(self, path: Path, data: bytes) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)

    def write(self, rel: str, content: str | bytes) -> None:
        data = content.encode() if isinstance(content, str) else content
        self._atomic(self.path(rel), data)
        self.files[rel] = sha256(data)
        self.save_manifest()

    def write_json(self, rel: str, doc) -> None:
        self.write(rel, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def read(self, rel: str) -> str:
        return self.path(rel).read_text()

    def read_json(self, rel: str):
        return json.loads(self.read(rel))

    def save_manifest(self) -> None:
        doc = dict(self.manifest)
        doc["files"] = dict(sorted(self.files.items()))
        self._atomic(self.root / MANIFEST, (json.dumps(doc, indent=2) + "\n").encode())

    def verify(self) -> list[str]:
        """Differences between the manifest and the files on disk."""
        diffs = []
        for rel, digest in sorted(self.files.items()):
            p = self.path(rel)
            if not p.exists():
                diffs.append(f"missing   {rel}")
                continue
            actual = sha256(p.read_bytes())
            if actual != digest:
                diffs.append(f"modified  {rel}: manifest {digest[:12]} on disk {actual[:12]}")
        return diffs


@dataclass
class BestState:
    iteration: int
    index: int
    program: RewardProgram
    policy_path: str
    criterion: float
    gazebo: float | None
    real: float | None

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "index": self.index,
            "program": pretty_print(self.program),
            "policy": self.policy_path,
            "criterion": self.criterion,
            "gazebo": self.gazebo,
            "real": self.real,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BestState":
        return cls(
            d["iteration"], d["index"], parse_program(d["program"]), d["policy"], d["criterion"], d["gazebo"], d["real"]
        )


@dataclass
class RunRecord:
    run_dir: Path
    iterations: list[dict] = field(default_factory=list)
    best: dict | None = None
    complete: bool = False

    def best_criteria(self) -> list[float | None]:
        """Best-so-far criterion after each iteration."""
        return [(it.get("best") or {}).get("criterion") for it in self.iterations]


def make_backend(cfg: FrameworkConfig):
    b = cfg.backend
    if b.kind == "mock":
        return MockBackend(seed=cfg.seed, fault_rate=b.fault_rate, repair_rate=b.repair_rate)
    return ChatCompletionBackend(
        b.base_url,
        b.model,
        api_key_env=b.api_key_env,
        timeout=b.timeout,
        max_retries=b.max_retries,
        max_concurrency=b.max_concurrency,
    )


def _cand(k: int) -> str:
    return f"cand_{k:02d}"


def _finite(x: float) -> float | None:
    return float(x) if math.isfinite(x) else None


def _train_job(args):
    env_cfg, program, teacher, beta, seed, iters, ppo = args
    try:
        params, metrics = train_candidate(env_cfg, program, teacher, beta, seed, iters, ppo)
        return params, metrics
    except TrainingFailed as exc:
        return None, TrainMetrics(failed=True, error=str(exc))


class Loop:
    def __init__(
        self,
        cfg: FrameworkConfig,
        run_dir: str | Path,
        backend=None,
        on_event: EventHook | None = None,
        config_dir: str | Path = ".",
    ):
        self.cfg = cfg
        self.store = RunStore(run_dir)
        self.backend = backend if backend is not None else make_backend(cfg)
        self.on_event = on_event or (lambda *a, **k: None)
        self.weights = cfg.weights()
        self.rules = cfg.safety_rules()
        self.f = cfg.homomorphism_map()
        self.ppo = cfg.ppo.build()
        self.train_env = cfg.training_env()
        self.stage_envs = {
            "train": replace(self.train_env, randomize={}, init_noise=0.0),
            "gazebo_like": cfg.gazebo_env(),
            "real_like": cfg.real_env(),
        }
        self.seeds, self.commands = eval_grid(self.ppo)
        self.reference = cfg.load_reference(config_dir)
        self.best: BestState | None = None
        self.feedback: str | None = None

    # ------------------------------------------------------------ helpers

    def _teacher(self) -> TeacherPolicy | None:
        if self.best is not None:
            return TeacherPolicy(kind="snapshot", snapshot=load_policy(self.store.path(self.best.policy_path)))
        return self.cfg.teacher.build()

    def _start(self, config_text: str) -> None:
        digest = sha256(config_text.encode())
        if not self.store.has(CONFIG):
            self.store.manifest["config_sha256"] = digest
            self.store.manifest["created"] = time.strftime("%Y-%m-%dT%H:%M:%S")
            self.store.write(CONFIG, config_text)

    # ------------------------------------------------------------ phases

    def _generate(self, it: int, d: str, bundle) -> tuple[list[CandidateSource], GenerationStats]:
        rel = f"{d}/candidates/generation.json"
        if self.store.has(rel):
            doc = self.store.read_json(rel)
            sources = []
            for s in doc["candidates"]:
                prog = None if s["program"] is None else parse_program(s["program"])
                sources.append(
                    CandidateSource(
                        s["slot"], s["raw_text"], prog, s["diagnostic"], s["attempt_index"], s["backend_id"],
                        s["parsed"], [(a["raw_text"], a["diagnostic"]) for a in s["attempts"]],
                    )
                )
            return sources, GenerationStats(**doc["stats"])
        g = self.cfg.generation
        sources, stats = generate_candidates(
            self.backend, bundle, self.cfg.candidates, TRAINING_SCHEMA, g.max_retries, g.temperature,
            key_prefix=(it,), workers=g.workers,
        )
        for s in sources:
            text = pretty_print(s.program) if s.program is not None else s.raw_text
            self.store.write(f"{d}/candidates/{_cand(s.slot)}.txt", text)
        self.store.write_json(rel, {"candidates": [s.to_dict() for s in sources], "stats": vars(stats)})
        return sources, stats

    def _train(self, it: int, d: str, sources: Sequence[CandidateSource]) -> list[CandidateRecord]:
        records = [
            CandidateRecord(s.slot, s.raw_text, s.program, diagnostic=s.diagnostic or "", failed=s.program is None)
            for s in sources
        ]
        teacher = self._teacher()
        beta = self.cfg.beta if teacher is not None else 0.0
        todo = []
        for rec in records:
            if rec.program is None:
                continue
            meta = f"{d}/metrics/{_cand(rec.index)}.json"
            if self.store.has(meta):
                self._load_trained(d, rec)
            else:
                seed = seeding.derive_seed(self.cfg.seed, seeding.TRAIN, it, rec.index)
                todo.append((rec, (self.train_env, rec.program, teacher, beta, seed, self.cfg.ppo.iters, self.ppo)))
        if self.cfg.workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=self.cfg.workers) as pool:
                futures = [(rec, pool.submit(_train_job, args)) for rec, args in todo]
                # results are merged in candidate order whatever order they finish in
                for rec, fut in futures:
                    self._store_trained(it, d, rec, *fut.result())
        else:
            for rec, args in todo:
                self._store_trained(it, d, rec, *_train_job(args))
        return records

    def _store_trained(self, it: int, d: str, rec: CandidateRecord, params, metrics: TrainMetrics) -> None:
        name = _cand(rec.index)
        rec.metrics = metrics
        if params is not None:
            self.store.write(f"{d}/policies/{name}.json", dump_policy(params))
            rec.params = params
        self.store.write(f"{d}/metrics/{name}.csv", metrics.to_csv())
        rec.failed = metrics.failed
        rec.diagnostic = metrics.error
        rec.train_score = train_criterion(metrics, None, self.weights) if not metrics.failed else -math.inf
        self.store.write_json(
            f"{d}/metrics/{name}.json",
            {"final": metrics.final, "failed": metrics.failed, "error": metrics.error,
             "criterion": _finite(rec.train_score)},
        )
        self.on_event("candidate_trained", iteration=it, index=rec.index)

    def _load_trained(self, d: str, rec: CandidateRecord) -> None:
        name = _cand(rec.index)
        meta = self.store.read_json(f"{d}/metrics/{name}.json")
        metrics = TrainMetrics.read_csv(self.store.path(f"{d}/metrics/{name}.csv"))
        metrics.final, metrics.failed, metrics.error = meta["final"], meta["failed"], meta["error"]
        rec.metrics = metrics
        rec.failed, rec.diagnostic = metrics.failed, metrics.error
        rec.train_score = -math.inf if meta["criterion"] is None else meta["criterion"]
        if not metrics.failed:
            rec.params = load_policy(self.store.path(f"{d}/policies/{name}.json"))

    def _evaluate(self, it: int, d: str, rec: CandidateRecord) -> None:
        assert rec.params is not None and rec.program is not None
        for s_idx, stage in enumerate(STAGES):
            if stage == "real_like" and not (rec.verdict and rec.verdict.passed):
                break
            noise = seeding.derive_seed(self.cfg.seed, seeding.EVAL, it, rec.index, s_idx)
            f = None if stage == "train" else self.f
            rep = homomorphic_eval(
                rec.params, rec.program, self.stage_envs[stage], f, self.seeds, self.commands, stage,
                self.weights, noise_seed=noise,
            )
            rec.reports[stage] = rep
            self.store.write(f"{d}/evals/{_cand(rec.index)}_{stage}.json", rep.to_json())
            if stage == "gazebo_like":
                rec.verdict = safety_check(rep, self.rules)
                self.store.write_json(
                    f"{d}/evals/{_cand(rec.index)}_safety.json",
                    {"passed": rec.verdict.passed, "violations": [list(v) for v in rec.verdict.violations]},
                )

    # ------------------------------------------------------------ iteration

    def run_iteration(self, it: int) -> dict:
        d = f"iter_{it:03d}"
        safety_text = [r.text() for r in self.rules]
        reference = self.best.program if self.best is not None else self.reference
        # only the previous iteration's feedback is carried into the prompt; it ends with the best program
        bundle = assemble_prompt(
            self.cfg.task, self.cfg.environment_description, TRAINING_SCHEMA, safety_text, reference,
            self.feedback, self.cfg.generation.token_budget,
        )
        if not self.store.has(f"{d}/prompts/prompt.json"):
            self.store.write_json(
                f"{d}/prompts/prompt.json",
                {"digest": bundle.digest(), "tokens": bundle.tokens(), "messages": bundle.messages()},
            )
        doc: dict = {"iteration": it, "prompt_digest": bundle.digest(), "status": "ok", "diagnostic": ""}
        try:
            sources, stats = self._generate(it, d, bundle)
        except GenerationError as exc:
            return self._fail(d, doc, f"generation failed: {exc}", feedback=None)
        doc["generation"] = vars(stats)

        records = self._train(it, d, sources)
        scores = [r.train_score if not r.failed else -math.inf for r in records]
        doc["candidates"] = [
            {"index": r.index, "valid_program": r.program is not None, "failed": r.failed,
             "diagnostic": r.diagnostic, "criterion": _finite(r.train_score)}
            for r in records
        ]
        try:
            selected = select_best(scores, self.cfg.c_bs)
        except SelectionError as exc:
            return self._fail(d, doc, f"selection failed: {exc}", feedback=compile_feedback(records, self._best_record()))
        doc["selected"] = selected

        entries = []
        for k in selected:
            rec = records[k]
            self._evaluate(it, d, rec)
            gz = rec.reports["gazebo_like"]
            real = rec.reports.get("real_like")
            entries.append(
                FinalEntry(
                    k,
                    -math.inf if gz.failed else gz.criterion_score,
                    None if real is None or real.failed else real.criterion_score,
                    rec.train_score,
                    bool(rec.verdict and rec.verdict.passed),
                )
            )
        chosen = select_final(entries, strict=self.cfg.exclude_unsafe)
        doc["final"] = chosen
        if chosen is not None:
            e = next(x for x in entries if x.index == chosen)
            candidate = BestState(
                it, chosen, records[chosen].program, f"{d}/policies/{_cand(chosen)}.json",
                records[chosen].train_score, _finite(e.gazebo), e.real,
            )
            doc["iteration_best"] = candidate.to_dict()
            if self.cfg.strict_alg1 or self.best is None or candidate.criterion > self.best.criterion:
                self.best = candidate
        feedback = compile_feedback(records, self._best_record(), self._best_scores())
        return self._finish(d, doc, feedback)

    def _best_record(self) -> CandidateRecord | None:
        if self.best is None:
            return None
        return CandidateRecord(self.best.index, program=self.best.program, train_score=self.best.criterion)

    def _best_scores(self) -> tuple[float | None, float | None]:
        return (None, None) if self.best is None else (self.best.gazebo, self.best.real)

    def _fail(self, d: str, doc: dict, diagnostic: str, feedback: str | None) -> dict:
        doc["status"] = "failed"
        doc["diagnostic"] = diagnostic
        log.warning("iteration %s failed: %s", d, diagnostic)
        if feedback is None:
            feedback = self.feedback  # keep what the previous iteration produced
        return self._finish(d, doc, feedback)

    def _finish(self, d: str, doc: dict, feedback: str | None) -> dict:
        self.feedback = feedback
        self.store.write(f"{d}/feedback.txt", feedback or "")
        doc["best"] = None if self.best is None else self.best.to_dict()
        self.store.write_json(f"{d}/iteration.json", doc)
        self.on_event("iteration_done", iteration=doc["iteration"])
        if doc["status"] == "failed" and self.cfg.strict_alg1:
            raise IterationFailure(doc["diagnostic"])
        return doc

    def _restore(self, d: str) -> dict:
        doc = self.store.read_json(f"{d}/iteration.json")
        self.best = None if doc.get("best") is None else BestState.from_dict(doc["best"])
        text = self.store.read(f"{d}/feedback.txt")
        self.feedback = text or None
        return doc

    # ------------------------------------------------------------ outputs

    def _final(self) -> None:
        if self.best is None:
            self.store.write_json("final/summary.json", {"best": None, "status": "no candidate survived"})
            return
        b = self.best
        d = f"iter_{b.iteration:03d}"
        self.store.write("final/best_program.txt", pretty_print(b.program))
        self.store.write("final/best_policy.json", self.store.path(b.policy_path).read_bytes())
        reports = {}
        for stage in STAGES:
            rel = f"{d}/evals/{_cand(b.index)}_{stage}.json"
            if self.store.has(rel):
                reports[stage] = self.store.read_json(rel)
        self.store.write_json("final/best_reports.json", reports)
        self.store.write_json("final/summary.json", {"best": b.to_dict(), "status": "ok"})

    def run(self, config_text: str) -> RunRecord:
        self._start(config_text)
        record = RunRecord(self.store.root)
        for it in range(self.cfg.iterations):
            d = f"iter_{it:03d}"
            if self.store.has(f"{d}/iteration.json"):
                record.iterations.append(self._restore(d))
                continue
            record.iterations.append(self.run_iteration(it))
        if not self.store.has("final/summary.json"):
            self._final()
        record.best = self.store.read_json("final/summary.json")["best"]
        record.complete = True
        return record


def run_loop(
    cfg: FrameworkConfig,
    run_dir: str | Path,
    backend=None,
    on_event: EventHook | None = None,
    config_dir: str | Path = ".",
) -> RunRecord:
    run_dir = Path(run_dir)
    if (run_dir / MANIFEST).exists():
        raise IntegrityError(f"{run_dir} already holds a run; use resume")
    run_dir.mkdir(parents=True, exist_ok=True)
    return Loop(cfg, run_dir, backend, on_event, config_dir).run(cfg.to_yaml())


def load_run_config(run_dir: str | Path) -> FrameworkConfig:
    store = RunStore(run_dir)
    if not (store.root / MANIFEST).exists():
        raise IntegrityError(f"no manifest in {run_dir}")
    text = store.read(CONFIG)
    if sha256(text.encode()) != store.manifest.get("config_sha256"):
        raise IntegrityError(f"{CONFIG} does not match the manifest's config hash")
    return parse_config(text)


def resume(
    run_dir: str | Path,
    backend=None,
    on_event: EventHook | None = None,
    config_dir: str | Path = ".",
) -> RunRecord:
    """Continue an interrupted run from its first incomplete step."""
    store = RunStore(run_dir)
    cfg = load_run_config(run_dir)
    diffs = store.verify()
    if diffs:
        raise IntegrityError("run directory does not match its manifest:\n" + "\n".join(diffs))
    return Loop(cfg, run_dir, backend, on_event, config_dir).run(store.read(CONFIG))


# ---------------------------------------------------------------- reporting


def _load_reports(store: RunStore, d: str, k: int) -> dict[str, EvalReport]:
    out = {}
    for stage in STAGES:
        rel = f"{d}/evals/{_cand(k)}_{stage}.json"
        if store.path(rel).exists():
            out[stage] = EvalReport.from_dict(store.read_json(rel))
    return out


def report(run_dir: str | Path, out_dir: str | Path | None = None) -> str:
    """Plain-text summary; CSV tables are written to ``out_dir`` (default: <run>/report)."""
    store = RunStore(run_dir)
    cfg = load_run_config(run_dir)
    out = Path(out_dir) if out_dir is not None else store.root / "report"
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"run {store.root}"]
    rows = ["iteration,status,valid,requested,selected,final,final_criterion,best_criterion,best_gazebo,best_real,diagnostic"]
    curve_rows = ["iteration,candidate,step,mean_reward,survival_time,sigma"]
    gen_rows = ["iteration,requested,parsed_ok,validated_ok,first_attempt_ok,repaired,retries_used"]
    complete = 0
    for it in range(cfg.iterations):
        d = f"iter_{it:03d}"
        if not store.path(f"{d}/iteration.json").exists():
            lines.append(f"iteration {it}: incomplete")
            rows.append(f"{it},incomplete,,,,,,,,,")
            continue
        complete += 1
        doc = store.read_json(f"{d}/iteration.json")
        best = doc.get("best") or {}
        gen = doc.get("generation") or {}
        final = doc.get("final")
        fin_crit = None
        for c in doc.get("candidates", []):
            if c["index"] == final:
                fin_crit = c["criterion"]
        diag = doc.get("diagnostic", "").replace(",", ";").replace("\n", " ")
        rows.append(
            ",".join(
                str(x) for x in (
                    it, doc["status"], gen.get("validated_ok", ""), gen.get("requested", ""),
                    " ".join(map(str, doc.get("selected", []))), "" if final is None else final,
                    "" if fin_crit is None else repr(fin_crit), best.get("criterion", ""),
                    best.get("gazebo", "") if best.get("gazebo") is not None else "",
                    best.get("real", "") if best.get("real") is not None else "", diag,
                )
            )
        )
        if gen:
            gen_rows.append(
                f"{it},{gen['requested']},{gen['parsed_ok']},{gen['validated_ok']},"
                f"{gen['first_attempt_ok']},{gen['repaired']},{gen['retries_used']}"
            )
        status = doc["status"] if doc["status"] == "ok" else f"failed: {doc['diagnostic']}"
        lines.append(
            f"iteration {it}: {status} | valid {gen.get('validated_ok', 0)}/{gen.get('requested', 0)} | "
            f"final {final if final is not None else 'n/a'} | best criterion {fmt2(best.get('criterion'))}"
        )
        for c in doc.get("candidates", []):
            csv_rel = f"{d}/metrics/{_cand(c['index'])}.csv"
            if store.path(csv_rel).exists():
                m = TrainMetrics.read_csv(store.path(csv_rel))
                for r in m.rows:
                    curve_rows.append(
                        f"{it},{c['index']},{int(r['iteration'])},{r['mean_reward']!r},{r['survival_time']!r},{r['sigma']!r}"
                    )
        if final is not None:
            reports = _load_reports(store, d, final)
            (out / f"grid_iter_{it:03d}.csv").write_text(grid_csv(reports, "term_sums"))
            lines.append(render_grid(reports, "term_sums"))
    summary_path = store.path("final/summary.json")
    if summary_path.exists() and complete == cfg.iterations:
        best = json.loads(summary_path.read_text())["best"]
        if best is not None:
            lines.append(
                f"best: iteration {best['iteration']} candidate {best['index']} | criterion {fmt2(best['criterion'])} | "
                f"gazebo {fmt2(best['gazebo'])} | real {fmt2(best['real'])}"
            )
            lines.append(best["program"].rstrip("\n"))
    else:
        lines.append("run incomplete")
    (out / "iterations.csv").write_text("\n".join(rows) + "\n")
    (out / "curves.csv").write_text("\n".join(curve_rows) + "\n")
    (out / "generation.csv").write_text("\n".join(gen_rows) + "\n")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    return text


__all__ = [
    "IntegrityError",
    "IterationFailure",
    "Loop",
    "RunRecord",
    "RunStore",
    "load_run_config",
    "make_backend",
    "report",
    "resume",
    "run_loop",
]
