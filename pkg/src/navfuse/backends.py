"""Policy backends: anything that maps an observation stream to action distributions.

Every backend has ``reset(episode)`` and ``act(obs, pose=None)``.  Only the
expert uses ``pose``; it is privileged simulator state that learned backends
never see.
"""

from __future__ import annotations

import logging
import os
import zlib
from dataclasses import dataclass
from typing import Protocol

import httpx
import numpy as np

from . import histpolicy as hp
from .expert import expert_action
from .gridworld import GOAL_CATEGORIES, N_ACTIONS, Episode, Observation, Pose
from .promptfmt import history_summary, parse_distribution, render_prompt
from .student import StudentParams, student_forward, validate_student

log = logging.getLogger(__name__)

LLM_URL_ENV = "NAVFUSE_LLM_URL"


class PolicyBackend(Protocol):
    name: str
    fallbacks: int

    def reset(self, episode: Episode) -> None: ...

    def act(self, obs: Observation, pose: Pose | None = None) -> np.ndarray: ...


def episode_seed(seed: int, episode_id: str) -> list[int]:
    """Seed material that depends on the run seed and a stable hash of the episode id."""
    return [int(seed), zlib.crc32(episode_id.encode("utf-8"))]


class _Base:
    name = "base"

    def __init__(self):
        self.episode: Episode | None = None
        self.fallbacks = 0

    def reset(self, episode: Episode) -> None:
        self.episode = episode
        self.fallbacks = 0

    def _require_reset(self):
        if self.episode is None:
            raise RuntimeError(f"{self.name} backend: act() called before reset()")


class ExpertBackend(_Base):
    name = "expert"

    def act(self, obs, pose=None):
        self._require_reset()
        if pose is None:
            raise ValueError("the expert backend needs the true pose")
        out = np.zeros(N_ACTIONS)
        out[int(expert_action(self.episode.grid, pose, self.episode.goal_cells))] = 1.0
        return out


class RandomBackend(_Base):
    """A fresh Dirichlet(1) distribution per step, seeded per (seed, episode)."""

    name = "random"

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed
        self.rng = None

    def reset(self, episode):
        super().reset(episode)
        self.rng = np.random.default_rng(episode_seed(self.seed, episode.id))

    def act(self, obs, pose=None):
        self._require_reset()
        return self.rng.dirichlet(np.ones(N_ACTIONS))


class HistPolicyBackend(_Base):
    """The behaviour-cloned recurrent policy on its own."""

    name = "bc"

    def __init__(self, params: hp.PolicyParams):
        super().__init__()
        self.params = params
        self.h = None

    def reset(self, episode):
        super().reset(episode)
        self.h = hp.zero_state(self.params)

    def act(self, obs, pose=None):
        self._require_reset()
        dist, self.h = hp.forward_step(self.params, self.h, obs)
        return dist


class StudentBackend(HistPolicyBackend):
    name = "student"

    def __init__(self, student: StudentParams, hist: hp.PolicyParams):
        super().__init__(hist)
        validate_student(student, hist)
        self.student = student

    def act(self, obs, pose=None):
        self._require_reset()
        p_sota, self.h = hp.forward_step(self.params, self.h, obs)
        return student_forward(self.student, self.params, obs, self.h, p_sota)


# ---------------------------------------------------------------------------
# remote text endpoint
# ---------------------------------------------------------------------------


class RemoteError(RuntimeError):
    pass


class RemoteHTTPError(RemoteError):
    def __init__(self, status: int, body: str):
        self.status, self.body = status, body
        super().__init__(f"HTTP {status}: {body[:200]!r}")


@dataclass(frozen=True)
class RemoteConfig:
    url: str
    timeout_s: float = 30.0
    max_retries: int = 2
    variant: int = 0

    def __post_init__(self):
        if not self.url:
            raise ValueError("remote backend needs an endpoint url")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")


def resolve_llm_url(flag: str | None) -> str | None:
    """The command-line value wins over the environment variable."""
    return flag or os.environ.get(LLM_URL_ENV) or None


def remote_act(
    config: RemoteConfig, goal, obs: Observation, history: str, p_sota, client: httpx.Client | None = None
) -> tuple[np.ndarray, bool]:
    """Ask the endpoint for a distribution; returns (distribution, used_fallback)."""
    prompt = render_prompt(goal, obs, history, p_sota, config.variant)
    own = client is None
    client = client or httpx.Client(timeout=config.timeout_s)
    last: Exception | None = None
    try:
        for attempt in range(config.max_retries + 1):
            try:
                resp = client.post(config.url, json={"prompt": prompt}, timeout=config.timeout_s)
            except httpx.TimeoutException as exc:
                last = exc
                continue
            except httpx.TransportError as exc:
                last = exc
                if attempt == config.max_retries:
                    raise RemoteError(f"request to {config.url} failed: {exc}") from exc
                continue
            if resp.status_code >= 400:
                raise RemoteHTTPError(resp.status_code, resp.text)
            try:
                text = resp.json()["text"]
                if not isinstance(text, str):
                    raise TypeError("'text' is not a string")
                return parse_distribution(text), False
            except (ValueError, KeyError, TypeError) as exc:
                # DistributionParseError is a ValueError; so is a JSON decode error
                last = exc
    finally:
        if own:
            client.close()
    log.warning("remote endpoint gave no usable answer after %d attempts (%s); using p_sota",
                config.max_retries + 1, last)
    return np.asarray(p_sota, dtype=float).copy(), True


class RemoteBackend(HistPolicyBackend):
    """Sends the rendered prompt to a text endpoint and parses its reply."""

    name = "remote"

    def __init__(self, config: RemoteConfig, hist: hp.PolicyParams):
        super().__init__(hist)
        self.config = config
        self.client = httpx.Client(timeout=config.timeout_s)
        self.actions: list[int] = []
        self.collisions = 0

    def reset(self, episode):
        super().reset(episode)
        self.actions, self.collisions = [], 0

    def act(self, obs, pose=None):
        self._require_reset()
        if obs.prev_action is not None:
            self.actions.append(obs.prev_action)
            self.collisions += int(obs.collided_last)
        p_sota, self.h = hp.forward_step(self.params, self.h, obs)
        summary = history_summary(self.actions, self.collisions)
        dist, fell_back = remote_act(self.config, GOAL_CATEGORIES[obs.goal], obs, summary, p_sota, self.client)
        self.fallbacks += int(fell_back)
        return dist

    def close(self):
        self.client.close()

