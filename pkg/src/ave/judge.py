"""Judge agent: predict a weakness set for one sample, stabilized by a k-run vote."""

from __future__ import annotations

import hashlib
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Sequence

from .assets import load_prompt
from .backend import Backend, CostLedger, MediaPart, ModelRequest, TextPart, complete
from .dataset import FAMILY_OF_CATEGORY, Sample, WeaknessSet, normalize_key
from .matching import semantic_set_match

logger = logging.getLogger(__name__)

HEADER = "WEAKNESSES:"
NONE_MARKER = "NONE"
_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+(.*\S)\s*$")


class JudgeParseError(ValueError):
    def __init__(self, message: str, raw_text: str):
        super().__init__(message)
        self.raw_text = raw_text


def prompt_id(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class JudgePrompt:
    """A judge system prompt. ``id`` is a content hash of ``text``."""

    text: str
    parent_id: str | None = None
    id: str = field(init=False)

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("judge prompt text is empty")
        object.__setattr__(self, "id", prompt_id(self.text))

    def to_dict(self) -> dict:
        return {"id": self.id, "parent_id": self.parent_id, "text": self.text}


# Candidates in the optimizer's table are judge prompts with lineage.
PromptCandidate = JudgePrompt


def initial_prompt(task_family: str, assets_root=None) -> JudgePrompt:
    family = normalize_key(task_family)
    if family not in set(FAMILY_OF_CATEGORY.values()):
        raise ValueError(f"unknown task family {task_family!r}")
    return JudgePrompt(load_prompt(f"judge_{family}", assets_root))


@dataclass(frozen=True)
class JudgeOutput:
    weaknesses: WeaknessSet
    raw_text: str


def parse_weaknesses(raw_text: str) -> WeaknessSet:
    """Parse the judge's answer.

    Accepted: an optional preamble, a ``WEAKNESSES:`` line, then either the
    single line ``NONE`` or bullet lines. Without the header the whole answer
    must be ``NONE`` or bullets. Items are trimmed; exact repeats are dropped.
    """
    lines = raw_text.strip().splitlines()
    header_at = None
    for i, line in enumerate(lines):
        if line.strip().upper() == HEADER:
            header_at = i
    body = lines[header_at + 1 :] if header_at is not None else lines
    body = [ln for ln in body if ln.strip()]
    if not body:
        raise JudgeParseError("no weakness list found", raw_text)
    if len(body) == 1 and body[0].strip().upper() == NONE_MARKER:
        return WeaknessSet()
    items: list[str] = []
    for line in body:
        m = _BULLET.match(line)
        if m is None:
            raise JudgeParseError(f"line is neither a bullet nor {NONE_MARKER}: {line.strip()[:80]!r}", raw_text)
        item = m.group(1).strip()
        if item not in items:
            items.append(item)
    return WeaknessSet(tuple(items))


def build_request(p: JudgePrompt, sample: Sample, *, seed: int | None = None, temperature: float = 0.0) -> ModelRequest:
    ctx = sample.context
    parts = [TextPart(f"Generation context:\n{ctx.instruction}")]
    parts += [MediaPart(kind, uri) for kind, uri in ctx.media_refs()]
    parts.append(MediaPart("video", sample.output_video_ref))
    return ModelRequest(p.text, parts, temperature=temperature, seed=seed)


def predict_weaknesses(
    p: JudgePrompt,
    sample: Sample,
    backend: Backend,
    ledger: CostLedger,
    *,
    seed: int | None = None,
    temperature: float = 0.0,
    tag: str = "judge",
) -> JudgeOutput:
    if not sample.output_video_ref:
        raise ValueError(f"sample {sample.id!r} has no output video")
    response = complete(backend, build_request(p, sample, seed=seed, temperature=temperature), ledger, tag)
    return JudgeOutput(parse_weaknesses(response.text), response.text)


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def majority_vote(
    runs: Sequence[WeaknessSet],
    k: int,
    match_backend: Backend,
    ledger: CostLedger,
    *,
    match_prompt: str | None = None,
) -> WeaknessSet:
    """Keep semantic clusters supported by at least ceil(k/2) distinct runs.

    Items of every pair of runs are linked by the match agent (identical
    strings are linked without asking); clusters are the connected
    components. A cluster's representative comes from its lowest-indexed run,
    preferring the shortest, then lexicographically smallest, member there.
    Output follows (representative run, position in run).
    """
    if k < 1 or len(runs) != k:
        raise ValueError(f"expected {k} runs, got {len(runs)}")
    nodes = [(r, i, item) for r, run in enumerate(runs) for i, item in enumerate(run)]
    if not nodes:
        return WeaknessSet()
    offset = {}
    n = 0
    for r, run in enumerate(runs):
        offset[r] = n
        n += len(run)
    dsu = _DisjointSet(n)

    for a in range(k):
        for b in range(a + 1, k):
            left, right = list(runs[a]), list(runs[b])
            free_left = list(range(len(left)))
            free_right = list(range(len(right)))
            for i in list(free_left):
                for j in free_right:
                    if left[i].strip() == right[j].strip():
                        dsu.union(offset[a] + i, offset[b] + j)
                        free_left.remove(i)
                        free_right.remove(j)
                        break
            if free_left and free_right:
                outcome = semantic_set_match(
                    [left[i] for i in free_left],
                    [right[j] for j in free_right],
                    match_backend,
                    ledger,
                    system_prompt=match_prompt,
                )
                lookup_l = {left[i]: i for i in free_left}
                lookup_r = {right[j]: j for j in free_right}
                for ref_item, pred_item in outcome.matched_pairs:
                    dsu.union(offset[a] + lookup_l[ref_item], offset[b] + lookup_r[pred_item])

    clusters: dict[int, list[tuple[int, int, str]]] = {}
    for node_index, node in enumerate(nodes):
        clusters.setdefault(dsu.find(node_index), []).append(node)

    threshold = math.ceil(k / 2)
    kept = []
    for members in clusters.values():
        support = {r for r, _, _ in members}
        if len(support) < threshold:
            continue
        first_run = min(support)
        rep = min((m for m in members if m[0] == first_run), key=lambda m: (len(m[2]), m[2]))
        kept.append(rep)
    kept.sort(key=lambda m: (m[0], m[1]))
    out: list[str] = []
    for _, _, item in kept:
        if item not in out:
            out.append(item)
    return WeaknessSet(tuple(out))


def judge_instance(
    p: JudgePrompt,
    sample: Sample,
    k: int,
    backend: Backend,
    match_backend: Backend,
    ledger: CostLedger,
    *,
    base_seed: int = 0,
    temperature: float = 0.0,
    match_prompt: str | None = None,
) -> JudgeOutput:
    """Run the judge ``k`` times (seeds base_seed..base_seed+k-1) and vote."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return predict_weaknesses(p, sample, backend, ledger, seed=base_seed, temperature=temperature)
    outputs = [
        predict_weaknesses(p, sample, backend, ledger, seed=base_seed + i, temperature=temperature) for i in range(k)
    ]
    voted = majority_vote([o.weaknesses for o in outputs], k, match_backend, ledger, match_prompt=match_prompt)
    raw = "\n\n".join(f"--- run {i + 1} ---\n{o.raw_text}" for i, o in enumerate(outputs))
    return JudgeOutput(voted, raw)
