"""Benchmark data model, JSONL ingestion, taxonomy validation and stratified splits."""

from __future__ import annotations

import json
import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence
from urllib.parse import urlsplit

from .assets import asset_path

logger = logging.getLogger(__name__)

TASK_FAMILIES = ("prompt_following", "physical_logical", "perception")

FAMILY_OF_CATEGORY = {
    "element_editing": "prompt_following",
    "partial_reference": "prompt_following",
    "script_continuation": "prompt_following",
    "physical_simulation": "physical_logical",
    "logical_reasoning": "physical_logical",
    "perception": "perception",
}

VERDICTS = ("pass", "fail")


class DatasetError(ValueError):
    """A dataset file could not be ingested."""


def normalize_key(name: str) -> str:
    """``"Physical Simulation"`` -> ``"physical_simulation"``."""
    return "_".join(name.strip().lower().replace("-", " ").split())


def is_valid_ref(ref: object) -> bool:
    """True for a syntactically valid URI or relative path."""
    if not isinstance(ref, str) or not ref or ref != ref.strip():
        return False
    if any(ch.isspace() or ord(ch) < 32 for ch in ref):
        return False
    try:
        parts = urlsplit(ref)
    except ValueError:
        return False
    if parts.scheme and not (parts.netloc or parts.path):
        return False
    return True


@dataclass(frozen=True)
class WeaknessSet:
    """Ordered free-form weaknesses. Empty means no noticeable weakness."""

    items: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(self.items))

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[str]:
        return iter(self.items)

    def __getitem__(self, index: int) -> str:
        return self.items[index]

    def to_list(self) -> list[str]:
        return list(self.items)


@dataclass(frozen=True)
class ContextBundle:
    instruction: str
    image_refs: tuple[str, ...] = ()
    audio_refs: tuple[str, ...] = ()
    video_refs: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in ("image_refs", "audio_refs", "video_refs"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def modalities(self) -> frozenset[str]:
        found = {"text"}
        if self.image_refs:
            found.add("image")
        if self.audio_refs:
            found.add("audio")
        if self.video_refs:
            found.add("video")
        return frozenset(found)

    def media_refs(self) -> list[tuple[str, str]]:
        """(kind, uri) for every attached medium, images first, then audio, then video."""
        return (
            [("image", r) for r in self.image_refs]
            + [("audio", r) for r in self.audio_refs]
            + [("video", r) for r in self.video_refs]
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "instruction": self.instruction,
            "image_refs": list(self.image_refs),
            "audio_refs": list(self.audio_refs),
            "video_refs": list(self.video_refs),
        }


@dataclass(frozen=True)
class Sample:
    id: str
    category: str
    subcategory: str
    task_family: str
    context: ContextBundle
    output_video_ref: str
    weaknesses: WeaknessSet
    model_name: str
    verdict: str | None = None

    def to_dict(self) -> dict[str, Any]:
        record = {
            "id": self.id,
            "category": self.category,
            "subcategory": self.subcategory,
            "task_family": self.task_family,
            "context": self.context.to_dict(),
            "output_video_ref": self.output_video_ref,
            "weaknesses": self.weaknesses.to_list(),
            "model_name": self.model_name,
        }
        if self.verdict is not None:
            record["verdict"] = self.verdict
        return record


@dataclass(frozen=True)
class Taxonomy:
    """Category -> subcategory map read from a versioned asset file."""

    categories: dict[str, tuple[str, ...]]
    version: str = "unversioned"

    def category_key(self, category: str) -> str | None:
        key = normalize_key(category)
        return key if key in self.categories else None

    def has_subcategory(self, category: str, subcategory: str) -> bool:
        key = self.category_key(category)
        if key is None:
            return False
        return normalize_key(subcategory) in self.categories[key]

    @property
    def n_subcategories(self) -> int:
        return sum(len(v) for v in self.categories.values())


def load_taxonomy(path: str | Path | None = None) -> Taxonomy:
    path = Path(path) if path is not None else asset_path("taxonomy.json")
    data = json.loads(path.read_text(encoding="utf-8"))
    categories = {
        normalize_key(cat): tuple(normalize_key(s) for s in subs)
        for cat, subs in data["categories"].items()
    }
    unknown = set(categories) - set(FAMILY_OF_CATEGORY)
    if unknown:
        raise DatasetError(f"taxonomy {path}: categories without a task family: {sorted(unknown)}")
    return Taxonomy(categories=categories, version=str(data.get("version", "unversioned")))


_default_taxonomy: Taxonomy | None = None


def default_taxonomy() -> Taxonomy:
    global _default_taxonomy
    if _default_taxonomy is None:
        _default_taxonomy = load_taxonomy()
    return _default_taxonomy


@dataclass
class ValidationReport:
    sample_id: str
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_sample(s: Sample, taxonomy: Taxonomy | None = None) -> ValidationReport:
    """Check every Sample invariant; violations are returned, never raised."""
    taxonomy = taxonomy or default_taxonomy()
    report = ValidationReport(sample_id=s.id)
    v = report.violations

    if not s.id or not s.id.strip():
        v.append("id: empty")
    if not s.context.instruction or not s.context.instruction.strip():
        v.append("context.instruction: empty")
    for name, refs in (
        ("image_refs", s.context.image_refs),
        ("audio_refs", s.context.audio_refs),
        ("video_refs", s.context.video_refs),
    ):
        for i, ref in enumerate(refs):
            if not is_valid_ref(ref):
                v.append(f"context.{name}[{i}]: invalid reference {ref!r}")
    if not is_valid_ref(s.output_video_ref):
        v.append(f"output_video_ref: invalid reference {s.output_video_ref!r}")

    category = taxonomy.category_key(s.category)
    if category is None:
        v.append(f"category: unknown {s.category!r}")
    else:
        if not taxonomy.has_subcategory(category, s.subcategory):
            v.append(f"subcategory: {s.subcategory!r} is not in category {s.category!r}")
        expected = FAMILY_OF_CATEGORY[category]
        if normalize_key(s.task_family) != expected:
            v.append(f"task_family: {s.task_family!r} does not match category {s.category!r} (expected {expected!r})")

    seen: set[str] = set()
    for i, item in enumerate(s.weaknesses):
        if not item.strip():
            v.append(f"weaknesses[{i}]: whitespace-only item")
            continue
        key = item.strip()
        if key in seen:
            v.append(f"weaknesses[{i}]: duplicate item {key!r}")
        seen.add(key)

    if not s.model_name or not s.model_name.strip():
        v.append("model_name: empty")
    if s.verdict is not None and s.verdict not in VERDICTS:
        v.append(f"verdict: {s.verdict!r} is not one of {VERDICTS}")
    return report


def _require(record: dict, name: str, kind: type | tuple[type, ...]) -> Any:
    if name not in record:
        raise KeyError(name)
    value = record[name]
    if not isinstance(value, kind):
        raise TypeError(f"field {name!r}: expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def _str_list(record: dict, name: str) -> tuple[str, ...]:
    value = record.get(name, [])
    if not isinstance(value, list) or not all(isinstance(x, str) for x in value):
        raise TypeError(f"field {name!r}: expected a list of strings")
    return tuple(value)


def sample_from_dict(record: dict) -> Sample:
    """Build a Sample from one decoded JSON record. Raises KeyError/TypeError on malformed input."""
    if not isinstance(record, dict):
        raise TypeError("record is not a JSON object")
    ctx = _require(record, "context", dict)
    context = ContextBundle(
        instruction=_require(ctx, "instruction", str),
        image_refs=_str_list(ctx, "image_refs"),
        audio_refs=_str_list(ctx, "audio_refs"),
        video_refs=_str_list(ctx, "video_refs"),
    )
    verdict = record.get("verdict")
    if verdict is not None and not isinstance(verdict, str):
        raise TypeError("field 'verdict': expected a string or null")
    return Sample(
        id=_require(record, "id", str),
        category=_require(record, "category", str),
        subcategory=_require(record, "subcategory", str),
        task_family=_require(record, "task_family", str),
        context=context,
        output_video_ref=_require(record, "output_video_ref", str),
        weaknesses=WeaknessSet(_str_list(record, "weaknesses")),
        model_name=_require(record, "model_name", str),
        verdict=verdict,
    )


def load_dataset(path: str | Path, taxonomy: Taxonomy | None = None) -> list[Sample]:
    """Read a JSONL dataset, validating every record. Blank lines are skipped."""
    path = Path(path)
    taxonomy = taxonomy or default_taxonomy()
    samples: list[Sample] = []
    first_line: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                sample = sample_from_dict(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            except KeyError as exc:
                raise DatasetError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from exc
            except TypeError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            report = validate_sample(sample, taxonomy)
            if not report.ok:
                raise DatasetError(f"{path}:{lineno}: record {sample.id!r}: " + "; ".join(report.violations))
            if sample.id in first_line:
                raise DatasetError(
                    f"{path}: duplicate id {sample.id!r} on lines {first_line[sample.id]} and {lineno}"
                )
            first_line[sample.id] = lineno
            samples.append(sample)
    logger.debug("loaded %d samples from %s", len(samples), path)
    return samples


def write_dataset(samples: Iterable[Sample], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class SplitAssignment:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "train_ids": list(self.train_ids),
                "val_ids": list(self.val_ids),
                "test_ids": list(self.test_ids),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitAssignment":
        data = json.loads(text)
        return cls(
            train_ids=tuple(data["train_ids"]),
            val_ids=tuple(data["val_ids"]),
            test_ids=tuple(data["test_ids"]),
            seed=int(data["seed"]),
        )


def split_dataset(ds: Sequence[Sample], seed: int) -> SplitAssignment:
    """Three-way split, stratified by (category, subcategory).

    Each stratum is shuffled and dealt round-robin into train/val/test,
    continuing the deal where the previous stratum stopped, so both the
    per-stratum counts and the overall sizes differ by at most one.
    Input order is irrelevant: ids are sorted before shuffling.
    """
    if len(ds) < 3:
        raise ValueError(f"need at least 3 samples to split, got {len(ds)}")
    strata: dict[tuple[str, str], list[str]] = defaultdict(list)
    for s in ds:
        strata[(normalize_key(s.category), normalize_key(s.subcategory))].append(s.id)
    ids = [i for group in strata.values() for i in group]
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids are not unique")

    rng = random.Random(seed)
    keys = sorted(strata)
    rng.shuffle(keys)
    buckets: list[list[str]] = [[], [], []]
    position = 0
    for key in keys:
        members = sorted(strata[key])
        rng.shuffle(members)
        for sid in members:
            buckets[position % 3].append(sid)
            position += 1
    return SplitAssignment(
        train_ids=tuple(buckets[0]),
        val_ids=tuple(buckets[1]),
        test_ids=tuple(buckets[2]),
        seed=seed,
    )


def select_ids(ds: Sequence[Sample], ids: Iterable[str]) -> list[Sample]:
    """Samples for ``ids`` in the order given."""
    by_id = {s.id: s for s in ds}
    return [by_id[i] for i in ids]


def group_by_task_family(ds: Iterable[Sample]) -> dict[str, list[Sample]]:
    groups: dict[str, list[Sample]] = {family: [] for family in TASK_FAMILIES}
    for s in ds:
        family = FAMILY_OF_CATEGORY.get(normalize_key(s.category))
        if family is None:
            raise ValueError(f"sample {s.id!r}: unknown category {s.category!r}")
        groups[family].append(s)
    return groups
