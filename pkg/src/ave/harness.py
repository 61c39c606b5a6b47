"""Benchmark-side tooling: group-wise pass rates, instruction rewriting and
the multi-turn interaction environment."""

from __future__ import annotations

import csv
import json
import logging
import random
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .assets import load_prompt
from .backend import Backend, CostLedger, MediaPart, ModelRequest, TextPart, complete
from .dataset import FAMILY_OF_CATEGORY, ContextBundle, Sample, normalize_key

logger = logging.getLogger(__name__)

MODALITIES = ("text", "image", "audio", "video")
CATEGORY_ORDER = tuple(FAMILY_OF_CATEGORY)


class RewriteError(Exception):
    pass


@dataclass(frozen=True)
class CapabilityProfile:
    model_name: str
    accepts: frozenset[str]

    def __post_init__(self) -> None:
        accepts = frozenset(self.accepts)
        object.__setattr__(self, "accepts", accepts)
        if "text" not in accepts:
            raise ValueError(f"profile {self.model_name!r}: text input is always required")
        unknown = accepts - set(MODALITIES)
        if unknown:
            raise ValueError(f"profile {self.model_name!r}: unknown modalities {sorted(unknown)}")


def load_profiles(path: str | Path) -> list[CapabilityProfile]:
    """JSON list of ``{"model_name": ..., "accepts": [...]}``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [CapabilityProfile(d["model_name"], frozenset(d["accepts"])) for d in data]


@dataclass
class PassRateReport:
    rows: dict[tuple[str, str], float]
    case_counts: dict[tuple[str, str], int]
    pass_counts: dict[tuple[str, str], int]

    def models(self) -> list[str]:
        return sorted({m for m, _ in self.rows})

    def to_records(self) -> list[dict]:
        return [
            {
                "model_name": model,
                "category": category,
                "pass_rate": self.rows[(model, category)],
                "passes": self.pass_counts[(model, category)],
                "cases": self.case_counts[(model, category)],
            }
            for model, category in sorted(self.rows, key=lambda k: (k[0], _category_rank(k[1])))
        ]

    def write_csv(self, path: str | Path) -> None:
        """One row per model, one column per category, percentages; '-' where no case applied."""
        categories = [c for c in CATEGORY_ORDER if any(cat == c for _, cat in self.rows)]
        categories += sorted({cat for _, cat in self.rows} - set(categories))
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["model_name", *categories])
            for model in self.models():
                cells = []
                for cat in categories:
                    rate = self.rows.get((model, cat))
                    cells.append("-" if rate is None else f"{100 * rate:.2f}")
                writer.writerow([model, *cells])

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_records(), indent=2) + "\n", encoding="utf-8")


def _category_rank(category: str) -> tuple[int, str]:
    return (CATEGORY_ORDER.index(category) if category in CATEGORY_ORDER else len(CATEGORY_ORDER), category)


def capability_groups(profiles: Iterable[CapabilityProfile]) -> dict[frozenset[str], list[str]]:
    groups: dict[frozenset[str], list[str]] = defaultdict(list)
    for p in profiles:
        groups[p.accepts].append(p.model_name)
    return dict(groups)


def compute_pass_rates(samples: Sequence[Sample], profiles: Sequence[CapabilityProfile]) -> PassRateReport:
    """Pass rates per (model, category) under the group-wise protocol.

    Models with identical input capabilities form a group; a case counts for a
    model only if every model of its group accepts all of the case's
    modalities, so group members are compared on the same cases.
    """
    by_name = {p.model_name: p for p in profiles}
    groups = capability_groups(profiles)
    group_accepts = {
        name: frozenset.intersection(*(by_name[m].accepts for m in groups[p.accepts])) for name, p in by_name.items()
    }
    passes: dict[tuple[str, str], int] = defaultdict(int)
    cases: dict[tuple[str, str], int] = defaultdict(int)
    for s in samples:
        if s.model_name not in by_name:
            raise ValueError(f"sample {s.id!r} references unknown model {s.model_name!r}")
        if s.verdict not in ("pass", "fail"):
            raise ValueError(f"sample {s.id!r} has no pass/fail verdict")
        if not s.context.modalities() <= group_accepts[s.model_name]:
            continue
        key = (s.model_name, normalize_key(s.category))
        cases[key] += 1
        passes[key] += s.verdict == "pass"
    rows = {key: passes[key] / n for key, n in cases.items() if n > 0}
    return PassRateReport(rows=rows, case_counts=dict(cases), pass_counts={k: passes[k] for k in cases})


def load_verdicts(path: str | Path) -> list[dict]:
    """JSONL of ``{sample_id, model_name, verdict}``."""
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            missing = {"sample_id", "model_name", "verdict"} - set(rec)
            if missing:
                raise ValueError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            if rec["verdict"] not in ("pass", "fail"):
                raise ValueError(f"{path}:{lineno}: verdict must be 'pass' or 'fail'")
            records.append(rec)
    return records


def attach_verdicts(cases: Sequence[Sample], verdicts: Iterable[Mapping]) -> list[Sample]:
    """One Sample per verdict record, copying the case's category and context."""
    by_id = {s.id: s for s in cases}
    out = []
    for v in verdicts:
        case = by_id.get(v["sample_id"])
        if case is None:
            raise ValueError(f"verdict for unknown sample {v['sample_id']!r}")
        out.append(
            Sample(
                id=f"{case.id}@{v['model_name']}",
                category=case.category,
                subcategory=case.subcategory,
                task_family=case.task_family,
                context=case.context,
                output_video_ref=case.output_video_ref,
                weaknesses=case.weaknesses,
                model_name=v["model_name"],
                verdict=v["verdict"],
            )
        )
    return out


def rewrite_instruction(
    context: ContextBundle,
    understanding_backend: Backend,
    ledger: CostLedger,
    *,
    system_prompt: str | None = None,
    seed: int | None = None,
    tag: str = "understanding",
) -> str:
    """Fold the multimodal context into one text instruction for a text-only video model."""
    parts = [TextPart(f"Original instruction:\n{context.instruction}")]
    parts += [MediaPart(kind, uri) for kind, uri in context.media_refs()]
    req = ModelRequest(system_prompt or load_prompt("rewrite"), parts, seed=seed)
    text = complete(understanding_backend, req, ledger, tag).text.strip()
    if not text:
        raise RewriteError("understanding model returned an empty rewrite")
    return text


# -- multi-turn interaction ---------------------------------------------------


@dataclass(frozen=True)
class Turn:
    feedback_in: str
    script_out: str
    verdict: str


@dataclass(frozen=True)
class EpisodeConfig:
    goal: str
    initial_video_ref: str
    max_turns: int
    seed: int

    def __post_init__(self) -> None:
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")


@dataclass
class InteractionEpisode:
    goal: str
    initial_video_ref: str
    max_turns: int
    seed: int
    turns: list[Turn] = field(default_factory=list)
    error: str | None = None

    @property
    def success_turn(self) -> int | None:
        for t, turn in enumerate(self.turns, start=1):
            if turn.verdict == "pass":
                return t
        return None

    @property
    def succeeded(self) -> bool:
        return self.success_turn is not None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["success_turn"] = self.success_turn
        return d


FeedbackProvider = Callable[[Sequence[Turn], int], str]
ScriptProvider = Callable[[str, Sequence[Turn], str], str]
VerdictProvider = Callable[[str, str], str]


def run_interaction_episode(
    config: EpisodeConfig,
    feedback_provider: FeedbackProvider,
    script_provider: ScriptProvider,
    verdict_provider: VerdictProvider,
) -> InteractionEpisode:
    episode = InteractionEpisode(config.goal, config.initial_video_ref, config.max_turns, config.seed)
    for t in range(1, config.max_turns + 1):
        try:
            history = tuple(episode.turns)
            feedback = feedback_provider(history, config.seed)
            script = script_provider(config.goal, history, feedback)
            verdict = verdict_provider(script, feedback)
        except Exception as exc:
            logger.warning("episode seed=%d aborted at turn %d: %s", config.seed, t, exc)
            episode.error = f"turn {t}: {type(exc).__name__}: {exc}"
            break
        if verdict not in ("pass", "fail"):
            episode.error = f"turn {t}: verdict provider returned {verdict!r}"
            break
        episode.turns.append(Turn(feedback, script, verdict))
        if verdict == "pass":
            break
    return episode


def per_turn_success(episodes: Sequence[InteractionEpisode]) -> tuple[list[float], float]:
    if not episodes:
        raise ValueError("no episodes")
    max_turns = {e.max_turns for e in episodes}
    if len(max_turns) != 1:
        raise ValueError(f"episodes disagree on max_turns: {sorted(max_turns)}")
    (n_turns,) = max_turns
    counts = [0] * n_turns
    for e in episodes:
        if e.success_turn is not None:
            counts[e.success_turn - 1] += 1
    n = len(episodes)
    return [c / n for c in counts], sum(counts) / n


class RandomFeedback:
    """Seeded choice from a fixed list of pupil reactions; the draw depends on (seed, turn)."""

    def __init__(self, options: Sequence[str]):
        if not options:
            raise ValueError("need at least one feedback option")
        self.options = list(options)

    def __call__(self, history: Sequence[Turn], seed: int) -> str:
        return random.Random(f"{seed}:{len(history)}").choice(self.options)


class ScriptedVerdicts:
    """Pass exactly at a configured turn per episode seed; fail otherwise."""

    def __init__(self, pass_at_turn: Mapping[int, int | None], seed: int):
        self.target = pass_at_turn.get(seed)
        self.turn = 0

    def __call__(self, script: str, feedback: str) -> str:
        self.turn += 1
        return "pass" if self.target is not None and self.turn == self.target else "fail"


class AgentFeedback:
    def __init__(self, backend: Backend, ledger: CostLedger, goal: str, initial_video_ref: str, system_prompt: str | None = None):
        self.backend, self.ledger = backend, ledger
        self.goal, self.initial_video_ref = goal, initial_video_ref
        self.system_prompt = system_prompt or load_prompt("interaction_feedback")

    def __call__(self, history: Sequence[Turn], seed: int) -> str:
        parts: list = [TextPart(f"Lesson goal: {self.goal}")]
        if not history:
            parts.append(MediaPart("video", self.initial_video_ref))
        else:
            parts.append(TextPart(f"Latest video script:\n{history[-1].script_out}"))
        req = ModelRequest(self.system_prompt, parts, temperature=1.0, seed=seed * 1000 + len(history))
        return complete(self.backend, req, self.ledger, "environment").text.strip()


class AgentScript:
    def __init__(self, backend: Backend, ledger: CostLedger, system_prompt: str | None = None):
        self.backend, self.ledger = backend, ledger
        self.system_prompt = system_prompt or load_prompt("interaction_script")

    def __call__(self, goal: str, history: Sequence[Turn], feedback: str) -> str:
        past = "\n".join(f"Turn {i}: pupil said {t.feedback_in!r}; script: {t.script_out}" for i, t in enumerate(history, 1))
        text = f"Lesson goal: {goal}\n\nPrevious turns:\n{past or '(none)'}\n\nPupil reaction:\n{feedback}"
        return complete(self.backend, ModelRequest(self.system_prompt, [TextPart(text)]), self.ledger, "script").text.strip()


class AgentVerdict:
    def __init__(self, backend: Backend, ledger: CostLedger, system_prompt: str | None = None):
        self.backend, self.ledger = backend, ledger
        self.system_prompt = system_prompt or load_prompt("interaction_verdict")

    def __call__(self, script: str, feedback: str) -> str:
        text = f"Pupil reaction:\n{feedback}\n\nTeacher script:\n{script}"
        reply = complete(self.backend, ModelRequest(self.system_prompt, [TextPart(text)]), self.ledger, "verdict").text
        word = reply.strip().upper()
        if word.startswith("PASS"):
            return "pass"
        if word.startswith("FAIL"):
            return "fail"
        raise ValueError(f"verdict agent replied {reply.strip()[:40]!r}")


def write_episode_logs(episodes: Sequence[InteractionEpisode], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, e in enumerate(episodes):
        (directory / f"episode_{i:04d}_seed{e.seed}.json").write_text(json.dumps(e.to_dict(), indent=2) + "\n", encoding="utf-8")
