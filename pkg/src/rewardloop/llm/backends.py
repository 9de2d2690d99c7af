"""Completion backends: a deterministic offline mock and an HTTP chat client."""
from __future__ import annotations

import os
import re
import threading
import time
from typing import Callable, Protocol, Sequence

import httpx
import numpy as np

from .. import seeding
from ..dsl import DSLError, RewardProgram, RewardTerm, parse_program, pretty_print
from .prompt import RETRY_INSTRUCTION

Messages = Sequence[dict]

# heading that the feedback compiler puts above the best program so far
BEST_PROGRAM_HEADER = "Best program so far"


class BackendError(Exception):
    """The backend could not produce a completion after its retries."""


class Backend(Protocol):
    backend_id: str

    def complete(self, messages: Messages, temperature: float, key: tuple[int, ...]) -> str:
        """One completion. ``key`` identifies the request (e.g. iteration, slot, attempt)."""
        ...


# term templates: (name, source with {s} scale and {v} width placeholders, scale range, width choices)
TEMPLATES = {
    "track_lin_vel": ("{s} * exp(-norm2(base_lin_vel - cmd_lin_vel) / {v})", (0.01, 0.05), (0.1, 0.25, 0.5)),
    "track_ang_vel": ("{s} * exp(-norm2(base_ang_vel - cmd_ang_vel) / {v})", (0.005, 0.02), (0.25, 0.5, 1.0)),
    "survival": ("{s} * survival_dt", (0.5, 2.0), (None,)),
    "success": (
        "{s} * survival_dt * (2.0 * exp(-norm2(base_lin_vel - cmd_lin_vel) / {v}) "
        "+ exp(-norm2(base_ang_vel - cmd_ang_vel) / {v}))",
        (0.5, 1.5),
        (0.25, 0.5),
    ),
    "torque_cost": ("-{s} * square(last_action)", (0.001, 0.01), (None,)),
    "balance": ("-{s} * square(pitch)", (0.1, 1.0), (None,)),
    "upright": ("{s} * exp(-square(pitch) / {v})", (0.005, 0.02), (0.01, 0.05)),
}
FAMILY = tuple(TEMPLATES)

# deliberately broken answers used for fault injection
MALFORMED = (
    "track_lin_vel: 0.02 * exp(-norm2(base_lin_vel - cmd_lin_vel) / 0.25\nsurvival: 1.0 * survival_dt\n",
    "track_lin_vel: 0.02 * exp(-norm2(base_lin_vel - cmd_lin_vel) / 0.25)\nfeet: 0.5 * foot_height\n",
    "survival: 1.0 * survival_dt\nsurvival: 0.5 * survival_dt\n",
    "track_lin_vel = 0.02 * exp(-norm2(base_lin_vel - cmd_lin_vel) / 0.25)\n",
    "balance: -0.5 * square(pitch) $ 2\n",
)


def _round(x: float) -> float:
    return float(f"{x:.4g}")


def _template_term(name: str, rng: np.random.Generator) -> str:
    source, (lo, hi), widths = TEMPLATES[name]
    s = _round(rng.uniform(lo, hi))
    v = widths[int(rng.integers(len(widths)))]
    return f"{name}: " + source.format(s=repr(s), v=repr(v))


def _find_best_program(text: str) -> RewardProgram | None:
    i = text.rfind(BEST_PROGRAM_HEADER)
    if i < 0:
        return None
    m = re.search(r"```[^\n`]*\n(.*?)```", text[i:], re.DOTALL)
    if m is None:
        return None
    try:
        return parse_program(m.group(1))
    except DSLError:
        return None


class MockBackend:
    """Deterministic offline stand-in for a language model.

    Randomness is derived from ``(seed, *key)`` only, so concurrent calls
    give the same answers as sequential ones. Without a best program in the
    prompt it samples from a small template family; with one it returns
    perturbations of that program: slot 0 jitters scales only, slot 1 also
    drops a term, later slots may add one.
    """

    def __init__(self, seed: int = 0, fault_rate: float = 0.0, repair_rate: float = 0.9):
        self.seed = int(seed)
        self.fault_rate = float(fault_rate)
        self.repair_rate = float(repair_rate)
        self.backend_id = f"mock:{self.seed}"
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, messages: Messages, temperature: float, key: tuple[int, ...]) -> str:
        with self._lock:
            self.calls += 1
        key = tuple(int(k) for k in key)
        rng = np.random.default_rng(seeding.derive_seed(self.seed, seeding.GENERATE, *key))
        attempt = key[-1] if key else 0
        last = messages[-1]["content"] if messages else ""
        is_retry = attempt > 0 and RETRY_INSTRUCTION.split("{")[0] in last
        broken = rng.uniform() < (1.0 - self.repair_rate if is_retry else self.fault_rate)
        if broken:
            return "Here is the reward:\n```\n" + MALFORMED[int(rng.integers(len(MALFORMED)))] + "```\n"
        prompt = "\n".join(m["content"] for m in messages if m["role"] != "assistant")
        best = _find_best_program(prompt)
        slot = key[-2] if len(key) >= 2 else 0
        program = self._perturb(best, slot, rng) if best is not None else self._sample(rng)
        return "Proposed reward:\n```\n" + program + "```\n"

    def _sample(self, rng: np.random.Generator) -> str:
        names = ["track_lin_vel"]
        for name in FAMILY[1:]:
            if rng.uniform() < 0.45:
                names.append(name)
        if "survival" not in names and "success" not in names:
            names.append("survival")
        return "".join(_template_term(n, rng) + "\n" for n in names)

    def _perturb(self, best: RewardProgram, slot: int, rng: np.random.Generator) -> str:
        terms = [RewardTerm(t.name, _round(t.scale * rng.uniform(0.8, 1.2)), t.expr) for t in best.terms]
        text = pretty_print(RewardProgram(tuple(terms), best.schema_name))
        if slot == 1 and len(terms) > 1:
            lines = text.splitlines(keepends=True)
            del lines[int(rng.integers(len(lines)))]
            text = "".join(lines)
        elif slot >= 2 and rng.uniform() < 0.5:
            missing = [n for n in FAMILY if n not in best.term_names]
            if missing:
                text += _template_term(missing[int(rng.integers(len(missing)))], rng) + "\n"
        return text


class ChatCompletionBackend:
    """Client for the common ``/chat/completions`` JSON protocol.

    Retries 429, 5xx and transport errors with exponential backoff; other
    HTTP errors fail immediately. The API key is read from the environment
    variable named by ``api_key_env`` and is never stored elsewhere.
    """

    RETRY_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 60.0,
        max_retries: int = 4,
        backoff: float = 1.0,
        max_backoff: float = 30.0,
        max_concurrency: int = 4,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff = backoff
        self.max_backoff = max_backoff
        self.backend_id = f"http:{model}"
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(max(1, max_concurrency))
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _delay(self, attempt: int, response: httpx.Response | None) -> float:
        if response is not None:
            retry_after = response.headers.get("retry-after")
            try:
                if retry_after is not None:
                    return min(float(retry_after), self.max_backoff)
            except ValueError:
                pass
        return min(self.backoff * 2**attempt, self.max_backoff)

    def complete(self, messages: Messages, temperature: float, key: tuple[int, ...] = ()) -> str:
        payload = {"model": self.model, "messages": list(messages), "temperature": temperature}
        url = f"{self.base_url}/chat/completions"
        last_error = ""
        for attempt in range(self.max_retries + 1):
            response = None
            try:
                with self._gate:
                    response = self._client.post(url, json=payload, headers=self._headers())
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
            else:
                if response.status_code == 200:
                    try:
                        return response.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise BackendError(f"malformed completion response: {exc}") from exc
                last_error = f"HTTP {response.status_code}"
                if response.status_code not in self.RETRY_STATUS:
                    raise BackendError(f"{last_error}: {response.text[:200]}")
            if attempt < self.max_retries:
                self._sleep(self._delay(attempt, response))
        raise BackendError(f"gave up after {self.max_retries + 1} attempts ({last_error})")

    def close(self) -> None:
        self._client.close()
