"""Builders and scripted agents shared by the test modules."""

from __future__ import annotations

import json
import re
from typing import Callable, Mapping, Sequence

from ave.backend import Agents, ModelRequest, Pricing, ScriptedBackend
from ave.dataset import FAMILY_OF_CATEGORY, ContextBundle, Sample, WeaknessSet, default_taxonomy
from ave.matching import parse_match_request
from ave.optimizer import parse_refine_request


def make_sample(
    id: str = "s1",
    *,
    category: str = "perception",
    subcategory: str = "counting",
    task_family: str | None = None,
    instruction: str = "A red ball bounces three times.",
    image_refs: Sequence[str] = (),
    audio_refs: Sequence[str] = (),
    video_refs: Sequence[str] = (),
    output_video_ref: str | None = None,
    weaknesses: Sequence[str] = (),
    model_name: str = "model-a",
    verdict: str | None = None,
) -> Sample:
    return Sample(
        id=id,
        category=category,
        subcategory=subcategory,
        task_family=task_family or FAMILY_OF_CATEGORY[category],
        context=ContextBundle(instruction, tuple(image_refs), tuple(audio_refs), tuple(video_refs)),
        output_video_ref=output_video_ref or f"videos/{id}.mp4",
        weaknesses=WeaknessSet(tuple(weaknesses)),
        model_name=model_name,
        verdict=verdict,
    )


def all_subcategories() -> list[tuple[str, str]]:
    tax = default_taxonomy()
    return [(cat, sub) for cat, subs in tax.categories.items() for sub in subs]


def make_dataset(n: int, weakness_pool: Sequence[str] = ("blurry face", "extra finger", "wrong count")) -> list[Sample]:
    """``n`` valid samples cycling over every subcategory; weaknesses vary by index."""
    subs = all_subcategories()
    out = []
    for i in range(n):
        cat, sub = subs[i % len(subs)]
        k = i % (len(weakness_pool) + 1)
        out.append(make_sample(f"s{i:04d}", category=cat, subcategory=sub, weaknesses=weakness_pool[:k]))
    return out


def write_jsonl(path, records: Sequence[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def concept_matcher(concept_of: Callable[[str], str]) -> Callable[[ModelRequest], str]:
    """Match agent that pairs items sharing a concept key, greedily in list order."""

    def respond(req: ModelRequest) -> str:
        y, yhat = parse_match_request(req.user_text())
        used: set[int] = set()
        pairs = []
        for i, a in enumerate(y):
            for j, b in enumerate(yhat):
                if j not in used and concept_of(a) == concept_of(b):
                    pairs.append([i, j])
                    used.add(j)
                    break
        return json.dumps({"pairs": pairs})

    return respond


def exact_matcher(req: ModelRequest) -> str:
    return concept_matcher(lambda s: s.strip().casefold())(req)


def match_backend(responder: Callable[[ModelRequest], str] = exact_matcher, **kw) -> ScriptedBackend:
    return ScriptedBackend("match-stub", responder=responder, pricing=kw.pop("pricing", Pricing(1.0, 1.0)), **kw)


def bullets(items: Sequence[str]) -> str:
    if not items:
        return "WEAKNESSES:\nNONE"
    return "WEAKNESSES:\n" + "\n".join(f"- {x}" for x in items)


# -- scripted optimization world ----------------------------------------------------
#
# Judge quality is a function of how many "Rule R<n>:" markers its system prompt
# carries. Sample i has difficulty (i // 3) % LEVELS, so every third-based split
# sees every level, and is answered correctly iff its difficulty is at most the
# marker count; otherwise the judge adds a hallucinated weakness to its answer.
# The scripted optimizer appends one more marker on every call.

LEVELS = 6
_MARKER = re.compile(r"Rule R(\d+):")


def marker_count(text: str) -> int:
    return len(_MARKER.findall(text))


def world_dataset(n: int, prefix: str = "w") -> list[Sample]:
    subs = all_subcategories()
    out = []
    for i in range(n):
        cat, sub = subs[i % len(subs)]
        weak = [f"defect in shot {i}"] if i % 2 == 0 else []
        sid = f"{prefix}{i:03d}"
        out.append(make_sample(sid, category=cat, subcategory=sub, weaknesses=weak, instruction=f"Shot {sid}."))
    return out


def world_judge(samples: Sequence[Sample], bonus: int = 0, name: str = "judge-stub") -> ScriptedBackend:
    """``bonus`` shifts the skill level, modelling a different judge model."""
    by_video = {s.output_video_ref: (i, s) for i, s in enumerate(samples)}

    def respond(req: ModelRequest) -> str:
        i, s = by_video[req.media("video")[-1]]
        if (i // 3) % LEVELS <= marker_count(req.system_prompt) + bonus:
            return bullets(list(s.weaknesses))
        return bullets(list(s.weaknesses) + [f"phantom artifact {i}"])

    return ScriptedBackend(name, responder=respond, pricing=Pricing(1.0, 4.0))


def world_optimizer(name: str = "optimizer-stub") -> ScriptedBackend:
    def respond(req: ModelRequest) -> str:
        current, _ = parse_refine_request(req.user_text())
        n = marker_count(current) + 1
        return f"<prompt>\n{current}\nRule R{n}: look again at shot-level detail.\n</prompt>"

    return ScriptedBackend(name, responder=respond, pricing=Pricing(1.0, 4.0))


def world_agents(samples: Sequence[Sample], bonus: int = 0) -> Agents:
    return Agents(judge=world_judge(samples, bonus), match=match_backend(), optimizer=world_optimizer())


WORLD_P0 = "Judge the video and list its weaknesses.\nUse the WEAKNESSES: format, or NONE.\nEnd of instructions."


def _rule_line(n: int) -> str:
    return f"Rule R{n}: look again at shot-level detail."


def world_stub_script(samples: Sequence[Sample], max_markers: int = 8) -> dict:
    """The marker world as a JSON stub script (substring rules only), keyed by role.

    Prompts are WORLD_P0 plus one rule line per marker, so the last line of a
    prompt tells how many markers it has.
    """
    last_line = {0: WORLD_P0.splitlines()[-1], **{n: _rule_line(n) for n in range(1, max_markers + 1)}}
    judge_rules = []
    for n in range(max_markers + 1):
        for i, s in enumerate(samples):
            if (i // 3) % LEVELS <= n:
                key = f"{last_line[n]}\nGeneration context:\n{s.context.instruction}"
                judge_rules.append({"contains": key, "response": bullets(list(s.weaknesses))})
    for i, s in enumerate(samples):
        key = f"Generation context:\n{s.context.instruction}"
        judge_rules.append({"contains": key, "response": bullets(list(s.weaknesses) + [f"phantom artifact {i}"])})
    optimizer_rules = []
    prompt = WORLD_P0
    for n in range(max_markers):
        child = prompt + "\n" + _rule_line(n + 1)
        optimizer_rules.append({"contains": f"{last_line[n]}\n</current_prompt>", "response": f"<prompt>\n{child}\n</prompt>"})
        prompt = child
    return {
        "judge": {"rules": judge_rules},
        # every matched pair in this world is (reference item 0, predicted item 0)
        "match": {"default": json.dumps({"pairs": [[0, 0]]})},
        "optimizer": {"rules": optimizer_rules},
        "understanding": {"default": "A rewritten, self-contained instruction."},
    }
