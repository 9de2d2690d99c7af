"""Candidate scoring, top-fraction selection, staged evaluation, safety gate and feedback."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dsl import (
    HomomorphismMap,
    MismatchReport,
    RewardEvalError,
    RewardProgram,
    apply_homomorphism,
    pretty_print,
)
from .envs import TRAINING_SCHEMA, EnvConfig, rollout_batch
from .llm.backends import BEST_PROGRAM_HEADER
from .policy.network import PolicyParams
from .policy.train import TrainMetrics, e_train, mean_policy

# observation metrics an evaluation produces, usable in criterion weights and safety rules
OBS_METRICS = (
    "survival_time",
    "velocity_error",
    "heading_error",
    "max_abs_pitch",
    "mean_abs_pitch",
    "max_abs_torque",
    "mean_abs_torque",
)

STAGES = ("train", "gazebo_like", "real_like")
STAGE_LABELS = {"train": "gym", "gazebo_like": "gazebo", "real_like": "real"}


class SelectionError(Exception):
    """Every candidate failed, so nothing can be selected."""


@dataclass(frozen=True)
class CriterionWeights:
    c_e: float = 1.0
    c_obs: Mapping[str, float] = field(default_factory=dict)
    c_bs: float = 0.15

    def __post_init__(self) -> None:
        if not (0.0 < self.c_bs <= 1.0):
            raise ValueError(f"c_bs must lie in (0, 1], got {self.c_bs}")
        unknown = sorted(set(self.c_obs) - set(OBS_METRICS))
        if unknown:
            raise ValueError(f"unknown observation metrics in c_obs: {unknown}; known: {list(OBS_METRICS)}")


def criterion(e_train_value: float, obs_values: Mapping[str, float], weights: CriterionWeights) -> float:
    """c_e * E_train + sum over metrics of c_obs[m] * obs[m]."""
    missing = [m for m in weights.c_obs if m not in obs_values]
    if missing:
        raise KeyError(f"observation metrics missing: {missing}")
    total = weights.c_e * e_train_value
    for name in sorted(weights.c_obs):
        total += weights.c_obs[name] * obs_values[name]
    return float(total)


def train_criterion(metrics: TrainMetrics, obs_values: Mapping[str, float] | None, weights: CriterionWeights) -> float:
    """Criterion for a trained candidate; E_train and observations come from its final evaluation."""
    if metrics.failed or "e_train" not in metrics.final:
        return -math.inf
    obs = metrics.final if obs_values is None else obs_values
    return criterion(metrics.final["e_train"], obs, weights)


def n_best(c_bs: float, k: int) -> int:
    # the small slack keeps products like 0.1 * 30 = 3.0000000000000004 at 3
    return max(1, math.ceil(c_bs * k - 1e-9))


def select_best(scores: Sequence[float], c_bs: float) -> list[int]:
    """Indices of the top ceil(c_bs * K) scores, best first; ties go to the lower index.

    Failed candidates (score -inf) are never selected.
    """
    if len(scores) == 0:
        raise ValueError("no candidates")
    alive = [i for i, s in enumerate(scores) if s != -math.inf and not math.isnan(s)]
    if not alive:
        raise SelectionError("all candidates failed")
    ranked = sorted(alive, key=lambda i: (-scores[i], i))
    return ranked[: n_best(c_bs, len(scores))]


@dataclass
class FinalEntry:
    index: int
    gazebo: float
    real: float | None  # None when the real stage did not run
    train_score: float
    safe: bool = True

    @property
    def total(self) -> float:
        return self.gazebo + (self.real if self.real is not None else 0.0)


def select_final(entries: Sequence[FinalEntry], strict: bool = False) -> int | None:
    """Index maximising gazebo + real totals.

    Candidates that skipped the real stage count 0 for it. Ties go to the
    higher training criterion, then the lower index. In strict mode unsafe
    candidates are excluded, and ``None`` is returned when none remain.
    """
    pool = [e for e in entries if e.safe or not strict]
    if not pool:
        if strict:
            return None
        raise ValueError("select_final needs at least one candidate")
    best = min(pool, key=lambda e: (-e.total, -e.train_score, e.index))
    return best.index


@dataclass
class EvalReport:
    stage: str
    term_sums: dict[str, float] = field(default_factory=dict)  # scaled, mean per-episode sum
    term_means: dict[str, float] = field(default_factory=dict)  # scaled, mean per step
    total: float = 0.0  # mean per-episode weighted total
    survival_time: float = 0.0
    velocity_error: float = 0.0
    heading_error: float = 0.0
    max_abs_pitch: float = 0.0
    mean_abs_pitch: float = 0.0
    max_abs_torque: float = 0.0
    mean_abs_torque: float = 0.0
    criterion_score: float = 0.0
    episodes: int = 0
    mismatch: MismatchReport = field(default_factory=MismatchReport)
    failed: bool = False
    diagnostic: str = ""

    def observations(self) -> dict[str, float]:
        return {m: float(getattr(self, m)) for m in OBS_METRICS}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mismatch"] = asdict(self.mismatch)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        d = dict(d)
        d["mismatch"] = MismatchReport(**d.get("mismatch", {}))
        return cls(**d)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    def to_json(self) -> str:
        # insertion order keeps the program's term order
        return json.dumps(self.to_dict(), indent=2) + "\n"


def homomorphic_eval(
    params: PolicyParams,
    program: RewardProgram,
    stage_cfg: EnvConfig,
    f: HomomorphismMap | None,
    seeds: Sequence[int],
    commands: Sequence[tuple[float, float]],
    stage: str,
    weights: CriterionWeights | None = None,
    noise_seed: int = 0,
) -> EvalReport:
    """Roll the policy out on the seed x command grid and score it with F(R).

    The train stage scores the unmapped program and its ``criterion_score``
    is the training criterion; deployment stages score the mapped program
    and their ``criterion_score`` is the mean episode total of F(R).
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if stage == "train" or f is None:
        mapped, mismatch = program, MismatchReport()
    else:
        mapped, mismatch = apply_homomorphism(program, f, stage_cfg.schema, TRAINING_SCHEMA)
    report = EvalReport(stage=stage, mismatch=mismatch)
    try:
        outcomes = rollout_batch(stage_cfg, mean_policy(params), mapped, seeds, commands, noise_seed=noise_seed)
    except RewardEvalError as exc:
        report.failed = True
        report.diagnostic = f"reward error: {exc}"
        # the score stays finite; callers check ``failed`` before ranking
        return report
    n = len(outcomes)
    steps = sum(len(o.trajectory) for o in outcomes)
    report.episodes = n
    for t in mapped.terms:
        # scaled contributions, so penalties read as negative numbers
        total = t.scale * sum(float(np.sum(o.trajectory.term_values.get(t.name, 0.0))) for o in outcomes)
        report.term_sums[t.name] = total / n
        report.term_means[t.name] = total / steps if steps else 0.0
    report.total = float(np.mean([np.sum(o.trajectory.totals) for o in outcomes]))
    report.survival_time = float(np.mean([o.survival_time for o in outcomes]))
    report.velocity_error = float(np.mean([o.mean_velocity_error for o in outcomes]))
    report.heading_error = float(np.mean([o.mean_heading_error for o in outcomes]))
    report.max_abs_pitch = float(np.max([o.max_abs_pitch for o in outcomes]))
    report.mean_abs_pitch = float(np.mean([o.mean_abs_pitch for o in outcomes]))
    report.max_abs_torque = float(np.max([o.max_abs_torque for o in outcomes]))
    report.mean_abs_torque = float(np.mean([o.mean_abs_torque for o in outcomes]))
    if stage == "train":
        et = e_train(report.survival_time, report.velocity_error, stage_cfg.t_max)
        report.criterion_score = criterion(et, report.observations(), weights or CriterionWeights())
    else:
        report.criterion_score = report.total
    return report


@dataclass(frozen=True)
class SafetyRule:
    name: str
    metric: str
    limit: float
    description: str = ""

    def __post_init__(self) -> None:
        if self.metric not in OBS_METRICS:
            raise ValueError(f"safety rule {self.name!r}: unknown metric {self.metric!r}")

    def text(self) -> str:
        return self.description or f"{self.metric} must stay at or below {self.limit}"


@dataclass
class SafetyVerdict:
    passed: bool
    violations: list[tuple[str, float, float]] = field(default_factory=list)  # (rule, observed, limit)


def safety_check(report: EvalReport, rules: Sequence[SafetyRule]) -> SafetyVerdict:
    """Every rule whose observed value exceeds its limit; limits are inclusive."""
    violations = []
    if report.failed:
        violations.append(("evaluation_failed", math.nan, math.nan))
    for r in rules:
        value = float(getattr(report, r.metric))
        if not (value <= r.limit):
            violations.append((r.name, value, float(r.limit)))
    return SafetyVerdict(not violations, violations)


# ---------------------------------------------------------------- rendering


def fmt2(x: float | None) -> str:
    """Fixed two-decimal rendering.

    Small negatives keep their sign ("-0.00") so a penalty stays visible as
    one; an exact negative zero prints as "0.00".
    """
    if x is None:
        return "n/a"
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return "0.00" if x == 0 else f"{x:.2f}"


def display_name(term: str) -> str:
    text = term.replace("_", " ")
    return text[:1].upper() + text[1:]


def grid_row(term: str, gym: float | None, gazebo: float | None, real: float | None) -> str:
    return f"{display_name(term)} | gym {fmt2(gym)} | gazebo {fmt2(gazebo)} | real {fmt2(real)}"


def stage_grid(
    reports: Mapping[str, EvalReport], quantity: str = "term_means"
) -> list[tuple[str, float | None, float | None, float | None]]:
    """(term, gym, gazebo, real) rows in the train program's term order."""
    names: list[str] = []
    for stage in STAGES:
        rep = reports.get(stage)
        if rep is not None:
            names += [n for n in getattr(rep, quantity) if n not in names]
    rows = []
    for name in names:
        vals = []
        for stage in STAGES:
            rep = reports.get(stage)
            vals.append(None if rep is None or rep.failed else getattr(rep, quantity).get(name))
        rows.append((name, *vals))
    return rows


def render_grid(reports: Mapping[str, EvalReport], quantity: str = "term_means") -> str:
    return "\n".join(grid_row(*row) for row in stage_grid(reports, quantity))


def grid_csv(reports: Mapping[str, EvalReport], quantity: str = "term_means") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["term", "gym", "gazebo", "real"])
    for name, *vals in stage_grid(reports, quantity):
        w.writerow([name] + ["" if v is None else repr(float(v)) for v in vals])
    return buf.getvalue()


@dataclass
class CandidateRecord:
    index: int
    source_text: str = ""
    program: RewardProgram | None = None
    params: PolicyParams | None = None
    metrics: TrainMetrics | None = None
    reports: dict[str, EvalReport] = field(default_factory=dict)
    verdict: SafetyVerdict | None = None
    train_score: float = -math.inf
    failed: bool = False
    diagnostic: str = ""


def _candidate_section(c: CandidateRecord) -> str:
    lines = [f"== Candidate {c.index} =="]
    if c.program is None:
        lines.append(f"status: unusable program; {c.diagnostic}")
        return "\n".join(lines)
    if c.failed:
        lines.append(f"status: training failed; {c.diagnostic}")
        lines.append("program:")
        lines.append(pretty_print(c.program).rstrip("\n"))
        return "\n".join(lines)
    lines.append("program:")
    lines.append(pretty_print(c.program).rstrip("\n"))
    fin = c.metrics.final if c.metrics is not None else {}
    lines.append(
        f"training: criterion {fmt2(c.train_score)} | E_train {fmt2(fin.get('e_train'))} | "
        f"survival {fmt2(fin.get('survival_time'))} s | velocity error {fmt2(fin.get('velocity_error'))} m/s"
    )
    if not c.reports:
        lines.append("not selected for deployment evaluation")
    else:
        lines.append("reward per episode by term (mean over episodes):")
        lines.append(render_grid(c.reports, "term_sums"))
        deltas = []
        for name, gym, gaz, real in stage_grid(c.reports, "term_sums"):
            parts = []
            if gym is not None and gaz is not None:
                parts.append(f"gazebo-gym {fmt2(gaz - gym)}")
            if gym is not None and real is not None:
                parts.append(f"real-gym {fmt2(real - gym)}")
            if parts:
                deltas.append(f"{display_name(name)} | " + " | ".join(parts))
        if deltas:
            lines.append("deltas:")
            lines += deltas
    for stage in ("gazebo_like", "real_like"):
        rep = c.reports.get(stage)
        if rep is None:
            continue
        lines.append(
            f"{STAGE_LABELS[stage]}: survival {fmt2(rep.survival_time)} s | velocity error "
            f"{fmt2(rep.velocity_error)} m/s | max |pitch| {fmt2(rep.max_abs_pitch)} rad | "
            f"max |torque| {fmt2(rep.max_abs_torque)} N*m"
        )
        if rep.failed:
            lines.append(f"{STAGE_LABELS[stage]} evaluation failed: {rep.diagnostic}")
        if not rep.mismatch.empty:
            lines.append(
                f"mismatch: unmapped signals {', '.join(rep.mismatch.unmapped_signals)}; "
                f"dropped terms {', '.join(rep.mismatch.dropped_terms)}"
            )
    if c.verdict is not None:
        if c.verdict.passed:
            lines.append("safety: passed")
        else:
            for rule, observed, limit in c.verdict.violations:
                lines.append(f"safety violation: {rule} observed {fmt2(observed)} limit {fmt2(limit)}")
            lines.append("real-like evaluation skipped")
    return "\n".join(lines)


def best_section(best: CandidateRecord, gazebo: float | None = None, real: float | None = None) -> str:
    assert best.program is not None
    return (
        f"### {BEST_PROGRAM_HEADER} (candidate {best.index})\n"
        "```\n" + pretty_print(best.program) + "```\n"
        f"scores: criterion {fmt2(best.train_score)} | gazebo {fmt2(gazebo)} | real {fmt2(real)}"
    )


def compile_feedback(
    candidates: Sequence[CandidateRecord],
    best: CandidateRecord | None = None,
    best_scores: tuple[float | None, float | None] = (None, None),
) -> str:
    """Deterministic plain-text summary of one round of candidates."""
    parts = [_candidate_section(c) for c in sorted(candidates, key=lambda c: c.index)]
    if best is not None and best.program is not None:
        parts.append(best_section(best, *best_scores))
    return "\n\n".join(parts) + "\n"
