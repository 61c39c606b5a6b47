"""Budgeted judge-prompt optimization.

The loop keeps a table of candidate prompts scored on the validation split.
Each iteration picks a candidate, scores it on a random training minibatch,
hands the textual feedback to the optimizer agent for a rewrite, and scores
the rewrite on validation. It stops when the shared ledger runs dry and
returns the best validated prompt.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .assets import load_prompt
from .backend import Agents, Backend, BudgetExhausted, CostLedger, ModelRequest, TextPart, complete, remaining_budget
from .dataset import Sample
from .judge import JudgeParseError, JudgePrompt, PromptCandidate, judge_instance
from .matching import InstanceEvaluation, MatchProtocolError, evaluate_instance
from .metrics import MetricKind, aggregate_confusion, phi_apply

logger = logging.getLogger(__name__)

DEFAULT_FEEDBACK_CHARS = 20_000


class RefinementError(Exception):
    pass


class SelectionStrategy(enum.Enum):
    BEST = "best"
    PARETO = "pareto"

    @classmethod
    def parse(cls, name: str) -> "SelectionStrategy":
        key = name.strip().lower()
        aliases = {"bestoftable": "best", "best-of-table": "best", "paretosample": "pareto", "pareto-sample": "pareto"}
        key = aliases.get(key, key)
        for s in cls:
            if s.value == key:
                return s
        raise ValueError(f"unknown selection strategy {name!r}; choose 'best' or 'pareto'")


@dataclass
class AVEConfig:
    metric: MetricKind = MetricKind.F1
    batch_size: int = 8
    votes: int = 5
    strategy: SelectionStrategy = SelectionStrategy.BEST
    seed: int = 0
    feedback_chars: int = DEFAULT_FEEDBACK_CHARS
    temperature: float = 0.0
    max_iterations: int | None = None
    workers: int = 1
    meta_prompt: str | None = None
    match_prompt: str | None = None

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.votes < 1:
            raise ValueError("votes must be >= 1")
        if self.feedback_chars < 1:
            raise ValueError("feedback_chars must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["metric"] = self.metric.value
        d["strategy"] = self.strategy.value
        for key in ("meta_prompt", "match_prompt"):
            if d[key] is not None:
                d[key] = hashlib.sha256(d[key].encode("utf-8")).hexdigest()[:16]
        return d


@dataclass
class TableEntry:
    prompt: PromptCandidate
    val_score: float
    per_instance_scores: dict[str, float]


class PromptScoreTable:
    """Validated candidates, one entry per prompt id, in insertion order."""

    def __init__(self) -> None:
        self.entries: list[TableEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, prompt_id: str) -> bool:
        return any(e.prompt.id == prompt_id for e in self.entries)

    def get(self, prompt_id: str) -> TableEntry:
        for e in self.entries:
            if e.prompt.id == prompt_id:
                return e
        raise KeyError(prompt_id)

    def upsert(self, prompt: PromptCandidate, val_score: float, per_instance_scores: dict[str, float]) -> None:
        """Replace an existing entry in place (keeping its position) or append."""
        entry = TableEntry(prompt, val_score, dict(per_instance_scores))
        for i, e in enumerate(self.entries):
            if e.prompt.id == prompt.id:
                entry.prompt = e.prompt  # first lineage wins
                self.entries[i] = entry
                return
        self.entries.append(entry)

    def best(self) -> TableEntry:
        if not self.entries:
            raise ValueError("prompt table is empty")
        best = self.entries[0]
        for e in self.entries[1:]:
            if e.val_score > best.val_score:
                best = e
        return best

    def to_dict(self) -> list[dict[str, Any]]:
        return [
            {"prompt": e.prompt.to_dict(), "val_score": e.val_score, "per_instance_scores": e.per_instance_scores}
            for e in self.entries
        ]


@dataclass
class IterationRecord:
    iteration: int
    selected_prompt_id: str
    minibatch_ids: list[str]
    batch_score: float | None
    feedback_digest: str | None
    new_prompt_id: str | None
    new_val_score: float | None
    best_val_score: float
    status: str = "accepted"
    reason: str | None = None


@dataclass
class OptimizationRun:
    config: AVEConfig
    ledger: CostLedger
    table: PromptScoreTable = field(default_factory=PromptScoreTable)
    history: list[IterationRecord] = field(default_factory=list)
    termination: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "termination": self.termination,
            "table": self.table.to_dict(),
            "history": [asdict(h) for h in self.history],
            "ledger": self.ledger.to_dict(),
        }


@dataclass
class DatasetSplits:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]

    def __post_init__(self) -> None:
        ids = [s.id for s in self.train + self.val + self.test]
        if len(ids) != len(set(ids)):
            raise ValueError("train/val/test splits overlap")


@dataclass
class SliceResult:
    score: float
    feedback: str
    evaluations: list[tuple[Sample, InstanceEvaluation]]


def instance_scalar(ev: InstanceEvaluation) -> float:
    tp, tn, fp, fn = ev.confusion.normalized
    return tp + tn - fp - fn


def _score_instance(p: JudgePrompt, sample: Sample, agents: Agents, ledger: CostLedger, config: AVEConfig) -> InstanceEvaluation:
    out = judge_instance(
        p,
        sample,
        config.votes,
        agents.judge,
        agents.match,
        ledger,
        base_seed=config.seed,
        temperature=config.temperature,
        match_prompt=config.match_prompt,
    )
    return evaluate_instance(out.weaknesses, sample.weaknesses, agents.match, ledger, system_prompt=config.match_prompt)


def compose_feedback(evaluations: Sequence[tuple[Sample, InstanceEvaluation]], budget_chars: int) -> str:
    """Join ``[id] feedback`` lines; when over budget keep a balanced subset.

    Omission-heavy and hallucination-heavy instances are taken alternately,
    perfect ones last, until the budget is used. Kept lines stay in their
    original order.
    """
    lines = [f"[{s.id}] {ev.feedback}" for s, ev in evaluations]
    full = "\n".join(lines)
    if len(full) <= budget_chars:
        return full
    omission_heavy, hallucination_heavy, perfect = [], [], []
    for idx, (_, ev) in enumerate(evaluations):
        _, _, fp, fn = ev.confusion.raw
        if fp == 0 and fn == 0:
            perfect.append(idx)
        elif fn >= fp:
            omission_heavy.append(idx)
        else:
            hallucination_heavy.append(idx)
    order: list[int] = []
    for a, b in zip(omission_heavy, hallucination_heavy):
        order += [a, b]
    shorter = min(len(omission_heavy), len(hallucination_heavy))
    order += omission_heavy[shorter:] + hallucination_heavy[shorter:] + perfect
    kept: list[int] = []
    used = 0
    for idx in order:
        cost = len(lines[idx]) + (1 if kept else 0)
        if used + cost <= budget_chars:
            kept.append(idx)
            used += cost
    if not kept:
        return lines[order[0]][:budget_chars]
    return "\n".join(lines[i] for i in sorted(kept))


def evaluate_slice(
    p: JudgePrompt, samples: Sequence[Sample], agents: Agents, ledger: CostLedger, config: AVEConfig
) -> SliceResult:
    if not samples:
        raise ValueError("cannot evaluate an empty slice")
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            evs = list(pool.map(lambda s: _score_instance(p, s, agents, ledger, config), samples))
    else:
        evs = [_score_instance(p, s, agents, ledger, config) for s in samples]
    evaluations = list(zip(samples, evs))
    score = phi_apply(config.metric, aggregate_confusion(ev.confusion for ev in evs))
    return SliceResult(score, compose_feedback(evaluations, config.feedback_chars), evaluations)


def evaluate_and_update(
    p: JudgePrompt,
    samples: Sequence[Sample],
    is_val: bool,
    table: PromptScoreTable,
    agents: Agents,
    ledger: CostLedger,
    config: AVEConfig,
) -> tuple[float, str]:
    result = evaluate_slice(p, samples, agents, ledger, config)
    if is_val:
        table.upsert(p, result.score, {s.id: instance_scalar(ev) for s, ev in result.evaluations})
    return result.score, result.feedback


def pareto_frontier(table: PromptScoreTable) -> list[TableEntry]:
    entries = table.entries
    keys = sorted(set.intersection(*(set(e.per_instance_scores) for e in entries))) if entries else []

    def dominates(a: TableEntry, b: TableEntry) -> bool:
        sa, sb = a.per_instance_scores, b.per_instance_scores
        return all(sa[k] >= sb[k] for k in keys) and any(sa[k] > sb[k] for k in keys)

    return [e for e in entries if not any(dominates(o, e) for o in entries if o is not e)]


def unique_wins(entries: Sequence[TableEntry]) -> list[int]:
    """Per entry, the number of instances where it is the strict unique maximum."""
    if not entries:
        return []
    keys = sorted(set.intersection(*(set(e.per_instance_scores) for e in entries)))
    wins = [0] * len(entries)
    for k in keys:
        scores = [e.per_instance_scores[k] for e in entries]
        top = max(scores)
        holders = [i for i, s in enumerate(scores) if s == top]
        if len(holders) == 1:
            wins[holders[0]] += 1
    return wins


def select_prompt(table: PromptScoreTable, strategy: SelectionStrategy, rng: random.Random) -> PromptCandidate:
    if not len(table):
        raise ValueError("cannot select from an empty prompt table")
    if strategy is SelectionStrategy.BEST:
        return table.best().prompt
    frontier = pareto_frontier(table)
    if len(frontier) == 1:
        return frontier[0].prompt
    # strict wins counted against the whole table; dominated entries never win strictly
    all_wins = unique_wins(table.entries)
    wins = [all_wins[table.entries.index(e)] for e in frontier]
    weights = wins if sum(wins) > 0 else [1] * len(frontier)
    return rng.choices(frontier, weights=weights, k=1)[0].prompt


_PROMPT_TAG = re.compile(r"<prompt>(.*?)</prompt>", re.DOTALL | re.IGNORECASE)


def render_refine_request(p: JudgePrompt, feedback: str) -> str:
    return f"<current_prompt>\n{p.text}\n</current_prompt>\n\n<feedback>\n{feedback}\n</feedback>"


def parse_refine_request(text: str) -> tuple[str, str]:
    """(current prompt, feedback) back out of a rendered refinement request."""
    prompt = re.search(r"<current_prompt>\n(.*?)\n</current_prompt>", text, re.DOTALL)
    feedback = re.search(r"<feedback>\n(.*?)\n</feedback>", text, re.DOTALL)
    if prompt is None or feedback is None:
        raise ValueError("not a refinement request")
    return prompt.group(1), feedback.group(1)


def extract_prompt(reply: str) -> str:
    m = _PROMPT_TAG.search(reply)
    return (m.group(1) if m else reply).strip()


def refine_prompt(
    p: JudgePrompt,
    feedback: str,
    optimizer_backend: Backend,
    ledger: CostLedger,
    *,
    meta_prompt: str | None = None,
    tag: str = "optimizer",
) -> PromptCandidate:
    if not feedback or not feedback.strip():
        raise ValueError("refine_prompt needs non-empty feedback")
    meta_prompt = meta_prompt or load_prompt("optimizer_meta")
    parts = [TextPart(render_refine_request(p, feedback))]
    for attempt in range(2):
        reply = complete(optimizer_backend, ModelRequest(meta_prompt, parts), ledger, tag).text
        text = extract_prompt(reply)
        if text and text != p.text.strip():
            return JudgePrompt(text, parent_id=p.id)
        problem = "empty" if not text else "identical to the current prompt"
        logger.info("optimizer reply rejected (attempt %d): %s", attempt + 1, problem)
        parts = parts[:1] + [TextPart(f"Your previous answer was {problem}. Return a changed, complete prompt.")]
    raise RefinementError(f"optimizer returned a prompt that was {problem} twice")


def run_ave(
    p0: JudgePrompt,
    splits: DatasetSplits,
    config: AVEConfig,
    agents: Agents,
    ledger: CostLedger,
) -> tuple[PromptCandidate, OptimizationRun]:
    if not splits.train or not splits.val:
        raise ValueError("run_ave needs non-empty train and val splits")
    run = OptimizationRun(config, ledger)
    table = run.table
    try:
        evaluate_and_update(p0, splits.val, True, table, agents, ledger, config)
    except BudgetExhausted:
        run.termination = "budget_exhausted_before_initial_validation"
        return p0, run

    rng = random.Random(config.seed)
    run.termination = "budget_exhausted"
    while remaining_budget(ledger) > 0 and not ledger.exhausted:
        if config.max_iterations is not None and len(run.history) >= config.max_iterations:
            run.termination = "max_iterations"
            break
        iteration = len(run.history) + 1
        p = select_prompt(table, config.strategy, rng)
        mini = rng.sample(splits.train, min(config.batch_size, len(splits.train)))
        record = IterationRecord(
            iteration=iteration,
            selected_prompt_id=p.id,
            minibatch_ids=[s.id for s in mini],
            batch_score=None,
            feedback_digest=None,
            new_prompt_id=None,
            new_val_score=None,
            best_val_score=table.best().val_score,
        )
        try:
            batch_score, feedback = evaluate_and_update(p, mini, False, table, agents, ledger, config)
            record.batch_score = batch_score
            record.feedback_digest = hashlib.sha256(feedback.encode("utf-8")).hexdigest()[:16]
            child = refine_prompt(p, feedback, agents.optimizer, ledger, meta_prompt=config.meta_prompt)
            record.new_prompt_id = child.id
            new_score, _ = evaluate_and_update(child, splits.val, True, table, agents, ledger, config)
            record.new_val_score = new_score
        except BudgetExhausted:
            logger.info("budget exhausted during iteration %d; discarding it", iteration)
            break
        except (RefinementError, JudgeParseError, MatchProtocolError) as exc:
            record.status = "rejected"
            record.reason = f"{type(exc).__name__}: {exc}"
        record.best_val_score = table.best().val_score
        run.history.append(record)
        logger.info(
            "iteration %d: batch %.4f, new %s, best %.4f, spent $%.4f",
            iteration,
            record.batch_score if record.batch_score is not None else float("nan"),
            record.new_val_score,
            record.best_val_score,
            ledger.spent_usd,
        )
    return table.best().prompt, run


def freeze_and_test(
    p_star: JudgePrompt,
    test_slice: Sequence[Sample],
    agents: Agents,
    ledger: CostLedger,
    config: AVEConfig,
    *,
    seen_ids: Sequence[str] = (),
) -> float:
    """Score a fixed prompt on held-out samples; nothing is updated."""
    overlap = {s.id for s in test_slice} & set(seen_ids)
    if overlap:
        raise ValueError(f"test slice overlaps train/val ids: {sorted(overlap)[:5]}")
    return evaluate_slice(p_star, test_slice, agents, ledger, config).score


def adapt_prompt(
    p_star: JudgePrompt,
    baseline_prompt: JudgePrompt,
    target_backend: Backend,
    test_slice: Sequence[Sample],
    agents: Agents,
    ledger: CostLedger,
    config: AVEConfig,
) -> tuple[float, float]:
    """(baseline score, transferred score) of two prompts on a target judge; no optimizer calls."""
    target = Agents(judge=target_backend, match=agents.match)
    baseline = evaluate_slice(baseline_prompt, test_slice, target, ledger, config).score
    adapted = evaluate_slice(p_star, test_slice, target, ledger, config).score
    return baseline, adapted


def _dump(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False, sort_keys=False) + "\n", encoding="utf-8")


def save_run(run_dir: str | Path, p_star: JudgePrompt, run: OptimizationRun) -> None:
    """Write table, history, p* and ledger as JSON documents into ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _dump(run_dir / "table.json", run.table.to_dict())
    _dump(
        run_dir / "history.json",
        {"termination": run.termination, "config": run.config.to_dict(), "iterations": [asdict(h) for h in run.history]},
    )
    _dump(run_dir / "p_star.json", p_star.to_dict())
    _dump(run_dir / "ledger.json", run.ledger.to_dict())
