"""Command-line entry point: ``ave <command> ...``.

Exit status: 0 on success, 1 when the command ran but found a problem
(validation violations, unknown models, provider failures), 2 for usage,
configuration and I/O errors.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

from . import assets
from .backend import (
    Agents,
    BackendError,
    CostLedger,
    HTTPBackend,
    Pricing,
    ScriptedBackend,
    load_pricing,
)
from .dataset import (
    DatasetError,
    group_by_task_family,
    load_dataset,
    load_taxonomy,
    sample_from_dict,
    select_ids,
    split_dataset,
    validate_sample,
)
from .harness import (
    AgentFeedback,
    AgentScript,
    AgentVerdict,
    EpisodeConfig,
    RandomFeedback,
    ScriptedVerdicts,
    attach_verdicts,
    compute_pass_rates,
    load_profiles,
    load_verdicts,
    per_turn_success,
    rewrite_instruction,
    run_interaction_episode,
    write_episode_logs,
)
from .judge import JudgePrompt, initial_prompt
from .metrics import MetricKind
from .optimizer import AVEConfig, DatasetSplits, SelectionStrategy, adapt_prompt, freeze_and_test, run_ave, save_run

logger = logging.getLogger("ave")

ROLES = ("judge", "match", "optimizer", "understanding")
FIXED_CLOCK = "1970-01-01T00:00:00+00:00"


class ConfigError(Exception):
    pass


class RunDirLocked(Exception):
    pass


@dataclass
class RunConfig:
    dataset: Path | None = None
    assets: Path | None = None
    run_dir: Path | None = None
    pricing: Path | None = None
    backends: dict[str, str] = field(default_factory=lambda: {r: "stub" for r in ROLES})
    metric: MetricKind = MetricKind.F1
    batch_size: int = 8
    votes: int = 5
    budget_usd: float = 30.0
    eval_budget_usd: float | None = None
    seed: int = 0
    strategy: SelectionStrategy = SelectionStrategy.BEST
    task_family: str | None = None
    initial_prompt: Path | None = None
    max_iterations: int | None = None
    stub: Path | None = None

    def check(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.votes < 1:
            raise ConfigError("votes must be >= 1")
        if not self.budget_usd > 0:
            raise ConfigError("budget_usd must be > 0")
        for name in ("dataset", "assets", "pricing", "initial_prompt", "stub"):
            path = getattr(self, name)
            if path is not None and not path.exists():
                raise ConfigError(f"{name}: {path} does not exist")
        for role, spec in self.backends.items():
            if role not in ROLES:
                raise ConfigError(f"unknown backend role {role!r}")
            if spec != "stub" and not spec.startswith("http:"):
                raise ConfigError(f"backend {role}: expected 'stub' or 'http:<model>', got {spec!r}")
            if spec == "stub" and self.stub is None:
                raise ConfigError(f"backend {role} is 'stub' but no --stub script was given")

    def ave_config(self) -> AVEConfig:
        return AVEConfig(
            metric=self.metric,
            batch_size=self.batch_size,
            votes=self.votes,
            strategy=self.strategy,
            seed=self.seed,
            max_iterations=self.max_iterations,
            meta_prompt=assets.load_prompt("optimizer_meta", self.assets),
            match_prompt=assets.load_prompt("match_agent", self.assets),
        )

    def to_manifest(self) -> dict[str, Any]:
        """Everything that determines a run's output; the run directory itself is excluded."""
        return {
            "dataset": str(self.dataset) if self.dataset else None,
            "backends": dict(sorted(self.backends.items())),
            "metric": self.metric.value,
            "batch_size": self.batch_size,
            "votes": self.votes,
            "budget_usd": self.budget_usd,
            "eval_budget_usd": self.eval_budget_usd,
            "seed": self.seed,
            "strategy": self.strategy.value,
            "task_family": self.task_family,
            "max_iterations": self.max_iterations,
        }


def _path(value: Any, base: Path) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_run_config(path: str | Path | None, args: argparse.Namespace) -> RunConfig:
    data: dict[str, Any] = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
        base = path.parent
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    cfg = RunConfig()
    try:
        for key in ("dataset", "assets", "run_dir", "pricing", "initial_prompt", "stub"):
            setattr(cfg, key, _path(data.get(key), base))
        if "backends" in data:
            cfg.backends = {**cfg.backends, **data["backends"]}
        if "metric" in data:
            cfg.metric = MetricKind.parse(data["metric"])
        if "strategy" in data:
            cfg.strategy = SelectionStrategy.parse(data["strategy"])
        for key in ("batch_size", "votes", "seed"):
            if key in data:
                setattr(cfg, key, int(data[key]))
        for key in ("budget_usd", "eval_budget_usd"):
            if data.get(key) is not None:
                setattr(cfg, key, float(data[key]))
        cfg.task_family = data.get("task_family")
        if data.get("max_iterations") is not None:
            cfg.max_iterations = int(data["max_iterations"])

        # command-line flags override the file
        if getattr(args, "dataset", None):
            cfg.dataset = Path(args.dataset)
        if getattr(args, "run_dir", None):
            cfg.run_dir = Path(args.run_dir)
        if getattr(args, "stub", None):
            cfg.stub = Path(args.stub)
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        if getattr(args, "budget_usd", None) is not None:
            cfg.budget_usd = args.budget_usd
        if getattr(args, "metric", None):
            cfg.metric = MetricKind.parse(args.metric)
        if getattr(args, "votes", None) is not None:
            cfg.votes = args.votes
        if getattr(args, "batch_size", None) is not None:
            cfg.batch_size = args.batch_size
        if getattr(args, "strategy", None):
            cfg.strategy = SelectionStrategy.parse(args.strategy)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg.check()
    return cfg


def _load_stub_script(path: Path) -> dict[str, Any]:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"stub script {path}: {exc}") from exc


def make_backend(spec: str, role: str, cfg: RunConfig) -> Any:
    prices = load_pricing(cfg.pricing)
    if spec == "stub":
        script = _load_stub_script(cfg.stub)
        section = script[role] if role in script else script
        return ScriptedBackend.from_script(section, name=f"stub-{role}", pricing=prices.get("stub", Pricing(1.0, 4.0)))
    model = spec.split(":", 1)[1]
    pricing = prices.get(model) or prices.get("default")
    if pricing is None:
        raise ConfigError(f"no pricing for model {model!r}")
    return HTTPBackend(model, pricing)


def make_agents(cfg: RunConfig) -> Agents:
    return Agents(**{role: make_backend(cfg.backends[role], role, cfg) for role in ROLES})


def _now(fixed: bool) -> str:
    return FIXED_CLOCK if fixed else dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


@contextmanager
def run_dir_lock(run_dir: Path) -> Iterator[None]:
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise RunDirLocked(f"{run_dir} is locked by another writer ({lock})") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _file_key(path: Path, cfg: RunConfig) -> str:
    root = cfg.assets or assets.asset_dir()
    try:
        return "assets/" + path.relative_to(root).as_posix()
    except ValueError:
        return str(path)


def _manifest(cfg: RunConfig, command: str, fixed_clock: bool, extra_files: Sequence[Path] = ()) -> dict[str, Any]:
    config = cfg.to_manifest()
    config_hash = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()
    files = [assets.asset_path(name, cfg.assets) for name in ("taxonomy.json", *assets.PROMPT_FILES)]
    files.append(cfg.pricing or assets.asset_path("pricing.json"))
    files += [p for p in (cfg.dataset, cfg.stub, cfg.initial_prompt, *extra_files) if p is not None]
    return {
        "command": command,
        "created_at": _now(fixed_clock),
        "config": config,
        "config_sha256": config_hash,
        "file_sha256": {_file_key(p, cfg): assets.file_sha256(p) for p in files if p.exists()},
        "seeds": {"split": cfg.seed, "optimizer": cfg.seed, "judge_base": cfg.seed},
    }


def _prepare_splits(cfg: RunConfig) -> tuple[DatasetSplits, Any]:
    if cfg.dataset is None:
        raise ConfigError("no dataset given (config 'dataset' or --dataset)")
    ds = load_dataset(cfg.dataset, load_taxonomy(assets.asset_path("taxonomy.json", cfg.assets)))
    if cfg.task_family:
        ds = group_by_task_family(ds)[cfg.task_family]
    assignment = split_dataset(ds, cfg.seed)
    splits = DatasetSplits(
        train=select_ids(ds, assignment.train_ids),
        val=select_ids(ds, assignment.val_ids),
        test=select_ids(ds, assignment.test_ids),
    )
    return splits, assignment


def _initial_prompt(cfg: RunConfig) -> JudgePrompt:
    if cfg.initial_prompt is not None:
        return JudgePrompt(cfg.initial_prompt.read_text(encoding="utf-8").strip())
    return initial_prompt(cfg.task_family or "prompt_following", cfg.assets)


def _eval_ledger(cfg: RunConfig) -> CostLedger:
    return CostLedger(cfg.eval_budget_usd or cfg.budget_usd)


# -- commands -----------------------------------------------------------------


def cmd_validate(args: argparse.Namespace) -> int:
    path = Path(args.dataset)
    if not path.exists():
        print(f"error: {path} does not exist", file=sys.stderr)
        return 2
    taxonomy = load_taxonomy(args.taxonomy) if args.taxonomy else None
    n_records = n_bad = 0
    seen: dict[str, int] = {}
    try:
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                n_records += 1
                try:
                    sample = sample_from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    n_bad += 1
                    print(f"line {lineno}: malformed record: {exc}")
                    continue
                problems = validate_sample(sample, taxonomy).violations
                if sample.id in seen:
                    problems.append(f"duplicate id (first on line {seen[sample.id]})")
                seen.setdefault(sample.id, lineno)
                if problems:
                    n_bad += 1
                    for p in problems:
                        print(f"line {lineno}: {sample.id}: {p}")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{n_records} records, {n_bad} with violations")
    return 1 if n_bad else 0


def cmd_optimize(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args)
    if cfg.run_dir is None:
        raise ConfigError("no run directory (config 'run_dir' or --run-dir)")
    splits, assignment = _prepare_splits(cfg)
    agents = make_agents(cfg)
    ave_config = cfg.ave_config()
    p0 = _initial_prompt(cfg)
    with run_dir_lock(cfg.run_dir):
        _write_json(cfg.run_dir / "manifest.json", _manifest(cfg, "optimize", args.fixed_clock))
        (cfg.run_dir / "splits.json").write_text(assignment.to_json() + "\n", encoding="utf-8")
        (cfg.run_dir / "p0.txt").write_text(p0.text + "\n", encoding="utf-8")
        ledger = CostLedger(cfg.budget_usd)
        p_star, run = run_ave(p0, splits, ave_config, agents, ledger)
        save_run(cfg.run_dir, p_star, run)
        (cfg.run_dir / "p_star.txt").write_text(p_star.text + "\n", encoding="utf-8")
        val_score = run.table.get(p_star.id).val_score if p_star.id in run.table else None
        seen = [s.id for s in splits.train + splits.val]
        test_score = freeze_and_test(p_star, splits.test, agents, _eval_ledger(cfg), ave_config, seen_ids=seen)
        scores = {
            "p_star_id": p_star.id,
            "p0_id": p0.id,
            "metric": cfg.metric.value,
            "val_score": val_score,
            "test_score": test_score,
            "iterations": len(run.history),
            "termination": run.termination,
            "spent_usd": ledger.spent_usd,
        }
        _write_json(cfg.run_dir / "scores.json", scores)
    print(f"p* {p_star.id}  val {cfg.metric.value}={val_score}  test {cfg.metric.value}={test_score}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args)
    splits, _ = _prepare_splits(cfg)
    prompt = JudgePrompt(Path(args.prompt).read_text(encoding="utf-8").strip())
    seen = [s.id for s in splits.train + splits.val]
    score = freeze_and_test(prompt, splits.test, make_agents(cfg), _eval_ledger(cfg), cfg.ave_config(), seen_ids=seen)
    print(json.dumps({"prompt_id": prompt.id, "metric": cfg.metric.value, "test_score": score}))
    return 0


def cmd_adapt(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args)
    splits, _ = _prepare_splits(cfg)
    agents = make_agents(cfg)
    target = make_backend(args.target_backend, "judge", cfg)
    p_star = JudgePrompt(Path(args.prompt).read_text(encoding="utf-8").strip())
    baseline = JudgePrompt(Path(args.baseline_prompt).read_text(encoding="utf-8").strip())
    ledger = _eval_ledger(cfg)
    base_score, adapted_score = adapt_prompt(p_star, baseline, target, splits.test, agents, ledger, cfg.ave_config())
    print(
        json.dumps(
            {
                "metric": cfg.metric.value,
                "baseline_score": base_score,
                "adapted_score": adapted_score,
                "optimizer_spend_usd": ledger.spent_by_tag("optimizer"),
            }
        )
    )
    return 0


def cmd_rewrite(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args)
    if cfg.dataset is None:
        raise ConfigError("no dataset given")
    ds = load_dataset(cfg.dataset, load_taxonomy(assets.asset_path("taxonomy.json", cfg.assets)))
    backend = make_backend(cfg.backends["understanding"], "understanding", cfg)
    ledger = CostLedger(cfg.budget_usd)
    prompt = assets.load_prompt("rewrite", cfg.assets)
    with Path(args.out).open("w", encoding="utf-8") as fh:
        for s in ds:
            text = rewrite_instruction(s.context, backend, ledger, system_prompt=prompt, seed=cfg.seed)
            record = {"sample_id": s.id, "original_instruction": s.context.instruction, "rewritten_instruction": text}
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    print(f"rewrote {len(ds)} instructions, spent ${ledger.spent_usd:.4f}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    taxonomy = load_taxonomy(args.taxonomy) if args.taxonomy else None
    cases = load_dataset(args.dataset, taxonomy)
    verdicts = load_verdicts(args.verdicts)
    if not verdicts:
        print("error: verdict file is empty", file=sys.stderr)
        return 1
    profiles = load_profiles(args.profiles)
    try:
        report = compute_pass_rates(attach_verdicts(cases, verdicts), profiles)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "pass_rates.csv")
    report.write_json(out / "pass_rates.json")
    print((out / "pass_rates.csv").read_text(encoding="utf-8"), end="")
    return 0


def _interaction_providers(spec: dict, seed: int, goal: str, video: str, stub: Path | None, pricing: Path | None, ledger: CostLedger):
    cfg = RunConfig(stub=stub, pricing=pricing)

    fb = spec.get("feedback", {})
    if "options" in fb:
        feedback = RandomFeedback(fb["options"])
    else:
        feedback = AgentFeedback(make_backend(fb["backend"], "environment", cfg), ledger, goal, video)

    sc = spec.get("script", {})
    if "template" in sc:
        template = sc["template"]

        def script(goal_: str, history, fb_text: str) -> str:
            return template.format(goal=goal_, feedback=fb_text, turn=len(history) + 1)
    else:
        script = AgentScript(make_backend(sc["backend"], "script", cfg), ledger)

    vd = spec.get("verdict", {})
    if "pass_at_turn" in vd:
        table = {int(k): (None if v is None else int(v)) for k, v in vd["pass_at_turn"].items()}
        verdict = ScriptedVerdicts(table, seed)
    else:
        verdict = AgentVerdict(make_backend(vd["backend"], "verdict", cfg), ledger)
    return feedback, script, verdict


def cmd_interact(args: argparse.Namespace) -> int:
    spec_path = Path(args.episodes)
    try:
        spec = json.loads(spec_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"{spec_path} not found") from exc
    seeds = spec.get("seeds")
    if seeds is None:
        seeds = list(range(int(spec.get("n_episodes", 0))))
    if args.seed is not None:
        seeds = [args.seed + s for s in seeds]
    if not seeds:
        print("error: no episodes requested", file=sys.stderr)
        return 1
    stub = Path(args.stub) if args.stub else None
    pricing = _path(spec.get("pricing"), spec_path.parent)
    ledger = CostLedger(args.budget_usd or float(spec.get("budget_usd", 30.0)))
    episodes = []
    for seed in seeds:
        config = EpisodeConfig(spec["goal"], spec["initial_video_ref"], int(spec["max_turns"]), int(seed))
        providers = _interaction_providers(spec, int(seed), config.goal, config.initial_video_ref, stub, pricing, ledger)
        episodes.append(run_interaction_episode(config, *providers))
    per_turn, overall = per_turn_success(episodes)
    out = Path(args.out_dir)
    write_episode_logs(episodes, out / "episodes")
    summary = {
        "created_at": _now(args.fixed_clock),
        "n_episodes": len(episodes),
        "max_turns": episodes[0].max_turns,
        "per_turn": per_turn,
        "overall": overall,
        "aborted": [e.seed for e in episodes if e.error],
    }
    _write_json(out / "summary.json", summary)
    print(json.dumps({"per_turn": per_turn, "overall": overall}))
    return 1 if summary["aborted"] else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ave", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--dataset")
        p.add_argument("--run-dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--budget-usd", type=float)
        p.add_argument("--metric", choices=[k.value for k in MetricKind])
        p.add_argument("--votes", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--strategy", choices=[s.value for s in SelectionStrategy])
        p.add_argument("--stub", help="stub script (JSON) for 'stub' backends")
        p.add_argument("--fixed-clock", action="store_true", help="write a constant timestamp")

    p = sub.add_parser("validate", help="check a dataset file against the taxonomy")
    p.add_argument("dataset")
    p.add_argument("--taxonomy")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("optimize", help="split, optimize the judge prompt, test p*")
    run_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("eval", help="score a frozen prompt on the test split")
    run_flags(p)
    p.add_argument("--prompt", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("adapt", help="compare a transferred prompt with a target's baseline prompt")
    run_flags(p)
    p.add_argument("--prompt", required=True)
    p.add_argument("--baseline-prompt", required=True)
    p.add_argument("--target-backend", required=True, help="'stub' or 'http:<model>'")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("rewrite", help="rewrite multimodal instructions into text")
    run_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rewrite)

    p = sub.add_parser("report", help="group-wise pass-rate table from a verdict file")
    p.add_argument("--verdicts", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--dataset", required=True, help="cases the verdicts refer to")
    p.add_argument("--taxonomy")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("interact", help="run multi-turn interaction episodes")
    p.add_argument("--episodes", required=True, help="episode configuration (JSON)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, help="offset added to every episode seed")
    p.add_argument("--budget-usd", type=float)
    p.add_argument("--stub")
    p.add_argument("--fixed-clock", action="store_true")
    p.set_defaults(func=cmd_interact)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, RunDirLocked, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, BackendError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
