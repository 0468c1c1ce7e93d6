"""Prompt rendering and the action-probability sentence grammar.

A distribution is written as one sentence of six clauses in fixed action order::

    Stop with probability 0.03, move forward with probability 0.44, ...,
    and look down with probability 0.01

Printed values use two decimals and are rounded with the largest-remainder
method, so they always add up to exactly 1.00.  The parser accepts clauses in
any order and any letter case, with or without the final "and" and a trailing
period.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from .gridworld import GOAL_CATEGORIES, N_ACTIONS, PATCH_SIZE, Observation

CLAUSE_NAMES = ("Stop", "move forward", "turn left", "turn right", "look up", "look down")
SUM_TOLERANCE = 0.05
PLACEHOLDERS = ("<GoalHere>", "<ImageHere>", "<HistoryHere>", "<ActionProbHere>")
TAG_PAIRS = (("<Goal>", "</Goal>"), ("<Img>", "</Img>"), ("<History>", "</History>"), ("<ActionProb>", "</ActionProb>"))


class DistributionParseError(ValueError):
    """Raised for text that does not follow the grammar; ``kind`` names the defect."""

    def __init__(self, kind: str, detail: str):
        self.kind, self.detail = kind, detail
        super().__init__(f"{kind}: {detail}")


def round_hundredths(d: Sequence[float]) -> list[int]:
    """Largest-remainder rounding to integer hundredths summing to 100."""
    p = np.asarray(d, dtype=float)
    if p.shape != (N_ACTIONS,) or not np.isfinite(p).all() or (p < 0).any() or p.sum() <= 0:
        raise ValueError("expected six finite non-negative probabilities")
    q = p / p.sum() * 100.0
    # the tiny slack keeps values such as 0.29 * 100 = 28.999... on the right side
    floors = [math.floor(v + 1e-9) for v in q]
    rems = [round(v - f, 9) for v, f in zip(q, floors)]
    spare = 100 - sum(floors)
    for i in sorted(range(N_ACTIONS), key=lambda i: (-rems[i], i))[: max(spare, 0)]:
        floors[i] += 1
    return floors


def serialize_distribution(d: Sequence[float]) -> str:
    units = round_hundredths(d)
    parts = [f"{name} with probability {u // 100}.{u % 100:02d}" for name, u in zip(CLAUSE_NAMES, units)]
    return ", ".join(parts[:-1]) + ", and " + parts[-1]


_CLAUSE_RE = re.compile(
    r"^(stop|move\s+forward|turn\s+left|turn\s+right|look\s+up|look\s+down)\s+with\s+probability\s+(\S+)$",
    re.IGNORECASE,
)
_SPLIT_RE = re.compile(r"\s*,\s*(?:and\s+)?|\s+and\s+", re.IGNORECASE)


def parse_distribution(text: str) -> np.ndarray:
    body = text.strip()
    if body.endswith("."):
        body = body[:-1].rstrip()
    values: dict[int, float] = {}
    for part in _SPLIT_RE.split(body):
        if not part:
            continue
        m = _CLAUSE_RE.match(part)
        if m is None:
            raise DistributionParseError("unrecognized clause", repr(part))
        idx = [n.lower() for n in CLAUSE_NAMES].index(" ".join(m.group(1).lower().split()))
        if idx in values:
            raise DistributionParseError("duplicate clause", CLAUSE_NAMES[idx])
        try:
            v = float(m.group(2))
        except ValueError:
            v = math.nan
        if not math.isfinite(v):
            raise DistributionParseError("non-numeric value", f"{CLAUSE_NAMES[idx]}: {m.group(2)!r}")
        values[idx] = v
    for i, name in enumerate(CLAUSE_NAMES):
        if i not in values:
            raise DistributionParseError("missing clause", name)
    out = np.maximum(np.array([values[i] for i in range(N_ACTIONS)]), 0.0)
    total = out.sum()
    if abs(total - 1.0) > SUM_TOLERANCE:
        raise DistributionParseError("bad sum", f"probabilities sum to {total:.4f}")
    return out / total


# ---------------------------------------------------------------------------
# prompt templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    variants: tuple[str, ...]

    def __post_init__(self):
        if not self.variants:
            raise ValueError("at least one template variant is required")
        for k, v in enumerate(self.variants):
            for ph in PLACEHOLDERS:
                if v.count(ph) != 1:
                    raise ValueError(f"variant {k}: placeholder {ph} must appear exactly once")
            for (open_tag, close_tag), ph in zip(TAG_PAIRS, PLACEHOLDERS):
                if open_tag + ph + close_tag not in v:
                    raise ValueError(f"variant {k}: {ph} must sit between {open_tag} and {close_tag}")

    @classmethod
    def parse(cls, text: str) -> "PromptTemplate":
        blocks, cur = [], []
        for line in text.splitlines():
            if line.strip() == "---":
                blocks.append("\n".join(cur).strip())
                cur = []
            else:
                cur.append(line)
        blocks.append("\n".join(cur).strip())
        return cls(tuple(b for b in blocks if b))

    @classmethod
    def default(cls) -> "PromptTemplate":
        return cls.parse(resources.files("navfuse").joinpath("resources/templates.txt").read_text(encoding="utf-8"))


def render_patch_text(obs: Observation) -> str:
    """11 rows of the local patch ('#' occupied, '.' free, '@' agent), row 0 first, then pose."""
    grid = np.asarray(obs.patch).reshape(PATCH_SIZE, PATCH_SIZE)
    c = PATCH_SIZE // 2
    lines = []
    for r in range(PATCH_SIZE):
        row = ["#" if v else "." for v in grid[r]]
        if r == c:
            row[c] = "@"
        lines.append("".join(row))
    dx, dy = obs.gps
    lines.append(f"gps=({dx:.2f},{dy:.2f}) compass={obs.compass:.2f}rad")
    return "\n".join(lines)


def history_summary(actions: Sequence[int], collisions: int, last: int = 5) -> str:
    """Short text stand-in for history tokens: step count, recent actions, collisions."""
    if not actions:
        return "no actions taken yet"
    recent = ", ".join(CLAUSE_NAMES[a].lower() for a in actions[-last:])
    return f"{len(actions)} actions taken, most recent: {recent}; {collisions} collisions"


def render_prompt(
    goal: str | int,
    obs: Observation,
    history: str,
    p_sota: Sequence[float],
    variant_index: int = 0,
    template: PromptTemplate | None = None,
) -> str:
    template = template or _default_template()
    if not 0 <= variant_index < len(template.variants):
        raise IndexError(f"template variant {variant_index} out of range (have {len(template.variants)})")
    label = GOAL_CATEGORIES[goal] if isinstance(goal, int) else goal
    out = template.variants[variant_index]
    for ph, value in zip(PLACEHOLDERS, (label, render_patch_text(obs), history, serialize_distribution(p_sota))):
        out = out.replace(ph, value)
    return out


def extract_tag(text: str, tag: str) -> str | None:
    """Content between the first ``<tag>`` and the following ``</tag>``, if present."""
    m = re.search(rf"<{tag}>(.*?)</{tag}>", text, re.DOTALL)
    return m.group(1) if m else None


_DEFAULT: PromptTemplate | None = None


def _default_template() -> PromptTemplate:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = PromptTemplate.default()
    return _DEFAULT
