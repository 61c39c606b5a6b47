"""Semantic set matching between referenced and predicted weakness sets.

The match agent pairs items one-to-one; unpaired referenced items are
omissions and unpaired predicted items are hallucinations. The per-instance
confusion vector follows the indicator-plus-count rule: when both sets are
non-empty, TP gets an instance-level +1 on top of the matched-pair count,
even if nothing matched.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from typing import Sequence

from .assets import load_prompt
from .backend import Backend, CostLedger, ModelRequest, TextPart, complete
from .dataset import WeaknessSet

logger = logging.getLogger(__name__)

PERFECT = "Perfect prediction."
NONE_SIDE = "(none)"


class ContractError(ValueError):
    pass


class MatchProtocolError(Exception):
    """The match agent did not return a valid one-to-one pairing."""

    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


@dataclass(frozen=True)
class MatchOutcome:
    matched_pairs: tuple[tuple[str, str], ...]
    omissions: tuple[str, ...]
    hallucinations: tuple[str, ...]

    @classmethod
    def from_index_pairs(cls, y: Sequence[str], yhat: Sequence[str], pairs: Sequence[tuple[int, int]]) -> "MatchOutcome":
        validate_pairs(pairs, len(y), len(yhat))
        used_ref = {i for i, _ in pairs}
        used_pred = {j for _, j in pairs}
        ordered = sorted(pairs)
        return cls(
            matched_pairs=tuple((y[i], yhat[j]) for i, j in ordered),
            omissions=tuple(item for i, item in enumerate(y) if i not in used_ref),
            hallucinations=tuple(item for j, item in enumerate(yhat) if j not in used_pred),
        )

    @classmethod
    def unmatched(cls, y: Sequence[str], yhat: Sequence[str]) -> "MatchOutcome":
        return cls((), tuple(y), tuple(yhat))


@dataclass(frozen=True)
class ConfusionVector:
    raw: tuple[float, float, float, float]
    normalized: tuple[float, float, float, float]

    @classmethod
    def from_raw(cls, tp: float, tn: float, fp: float, fn: float) -> "ConfusionVector":
        total = tp + tn + fp + fn
        if total <= 0:
            raise ContractError("raw confusion total must be >= 1")
        return cls((tp, tn, fp, fn), (tp / total, tn / total, fp / total, fn / total))

    @property
    def tp(self) -> float:
        return self.normalized[0]

    @property
    def tn(self) -> float:
        return self.normalized[1]

    @property
    def fp(self) -> float:
        return self.normalized[2]

    @property
    def fn(self) -> float:
        return self.normalized[3]


@dataclass(frozen=True)
class InstanceEvaluation:
    feedback: str
    confusion: ConfusionVector
    outcome: MatchOutcome

    @property
    def n_predicted(self) -> int:
        return len(self.outcome.matched_pairs) + len(self.outcome.hallucinations)

    @property
    def n_referenced(self) -> int:
        return len(self.outcome.matched_pairs) + len(self.outcome.omissions)


def validate_pairs(pairs: Sequence[tuple[int, int]], n_ref: int, n_pred: int) -> None:
    seen_ref: set[int] = set()
    seen_pred: set[int] = set()
    for pair in pairs:
        if len(pair) != 2:
            raise MatchProtocolError(f"pair {pair!r} does not have two indices")
        i, j = pair
        if not (isinstance(i, int) and isinstance(j, int)) or isinstance(i, bool) or isinstance(j, bool):
            raise MatchProtocolError(f"pair {pair!r} has non-integer indices")
        if not 0 <= i < n_ref:
            raise MatchProtocolError(f"referenced index {i} out of range 0..{n_ref - 1}")
        if not 0 <= j < n_pred:
            raise MatchProtocolError(f"predicted index {j} out of range 0..{n_pred - 1}")
        if i in seen_ref:
            raise MatchProtocolError(f"referenced index {i} paired more than once")
        if j in seen_pred:
            raise MatchProtocolError(f"predicted index {j} paired more than once")
        seen_ref.add(i)
        seen_pred.add(j)


def render_match_request(y: Sequence[str], yhat: Sequence[str]) -> str:
    return json.dumps({"referenced": list(y), "predicted": list(yhat)}, ensure_ascii=False, indent=1)


def parse_match_request(text: str) -> tuple[list[str], list[str]]:
    """Inverse of :func:`render_match_request`; handy for scripted match agents."""
    start = text.index("{")
    data, _ = json.JSONDecoder().raw_decode(text[start:])
    return list(data["referenced"]), list(data["predicted"])


_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def parse_match_reply(text: str) -> list[tuple[int, int]]:
    """Extract ``{"pairs": [[i, j], ...]}`` from the agent's reply."""
    candidates = [text.strip()] + [m.strip() for m in _FENCE.findall(text)]
    if "{" in text:
        candidates.append(text[text.index("{") : text.rindex("}") + 1])
    for chunk in candidates:
        try:
            data = json.loads(chunk)
        except (json.JSONDecodeError, ValueError):
            continue
        if isinstance(data, dict) and isinstance(data.get("pairs"), list):
            pairs = data["pairs"]
            if not all(isinstance(p, list) for p in pairs):
                raise MatchProtocolError("each pair must be a two-element list", text)
            return [tuple(p) for p in pairs]
    raise MatchProtocolError("no {\"pairs\": [...]} object in match reply", text)


def semantic_set_match(
    y: WeaknessSet | Sequence[str],
    yhat: WeaknessSet | Sequence[str],
    match_backend: Backend,
    ledger: CostLedger,
    *,
    system_prompt: str | None = None,
    tag: str = "match",
) -> MatchOutcome:
    y, yhat = list(y), list(yhat)
    if not y or not yhat:
        raise ContractError("semantic_set_match needs two non-empty sets")
    system_prompt = system_prompt or load_prompt("match_agent")
    parts = [TextPart(render_match_request(y, yhat))]
    last_error: MatchProtocolError | None = None
    for attempt in range(2):
        response = complete(match_backend, ModelRequest(system_prompt, parts), ledger, tag)
        try:
            return MatchOutcome.from_index_pairs(y, yhat, parse_match_reply(response.text))
        except MatchProtocolError as exc:
            last_error = MatchProtocolError(str(exc), response.text)
            logger.info("match agent reply rejected (attempt %d): %s", attempt + 1, exc)
            parts = parts[:1] + [
                TextPart(
                    f"Your previous reply was rejected: {exc}. Each index may appear in at most one pair. "
                    'Reply again with only {"pairs": [[referenced_index, predicted_index], ...]}.'
                )
            ]
    assert last_error is not None
    raise last_error


def confusion_from_sets(
    y: Sequence[str], yhat: Sequence[str], outcome: MatchOutcome | None = None
) -> ConfusionVector:
    both = len(y) > 0 and len(yhat) > 0
    if both and outcome is None:
        raise ContractError("a MatchOutcome is required when both sets are non-empty")
    if not both and outcome is not None:
        raise ContractError("a MatchOutcome must not be supplied when a set is empty")
    if outcome is not None:
        n_tp, n_fp, n_fn = len(outcome.matched_pairs), len(outcome.hallucinations), len(outcome.omissions)
    else:
        n_tp = n_fp = n_fn = 0
    tp = int(both) + n_tp
    tn = int(len(y) == 0 and len(yhat) == 0)
    fp = int(len(y) == 0 and len(yhat) > 0) + n_fp
    fn = int(len(y) > 0 and len(yhat) == 0) + n_fn
    return ConfusionVector.from_raw(tp, tn, fp, fn)


def synthesize_feedback(
    confusion: ConfusionVector, outcome: MatchOutcome | None, y: Sequence[str], yhat: Sequence[str]
) -> str:
    _, _, fp, fn = confusion.raw
    if fp == 0 and fn == 0:
        return PERFECT
    if outcome is not None:
        omissions, hallucinations = list(outcome.omissions), list(outcome.hallucinations)
    else:
        omissions = list(y) if not yhat else []
        hallucinations = list(yhat) if not y else []
    return f"Omissions: {'; '.join(omissions) or NONE_SIDE}; Hallucinations: {'; '.join(hallucinations) or NONE_SIDE}"


def evaluate_instance(
    yhat: WeaknessSet | Sequence[str],
    y: WeaknessSet | Sequence[str],
    match_backend: Backend,
    ledger: CostLedger,
    *,
    system_prompt: str | None = None,
) -> InstanceEvaluation:
    y, yhat = list(y), list(yhat)
    outcome = None
    if y and yhat:
        outcome = semantic_set_match(y, yhat, match_backend, ledger, system_prompt=system_prompt)
    confusion = confusion_from_sets(y, yhat, outcome)
    feedback = synthesize_feedback(confusion, outcome, y, yhat)
    return InstanceEvaluation(feedback, confusion, outcome or MatchOutcome.unmatched(y, yhat))
