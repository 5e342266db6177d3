"""Command line entry point: ``modestop {run,simulate,sweep,report}``.

Settings resolve as flag > config file > built-in default. The config file
is a flat ``key = value`` document (``#`` comments allowed); keys are the
long flag names with dashes or underscores. API keys are read only from
the environment variable named by ``api-key-env``.
"""

from __future__ import annotations

import argparse
import asyncio
import configparser
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from . import __version__
from .bench import emit_report, load_dataset, read_results, run_benchmark
from .simulator import (
    REFERENCE_GRIDS,
    SWEEP_PARAM,
    bundled_pools,
    estimate_distribution,
    family_policy,
    simulate_question,
    sweep,
    write_sweep_csv,
)
from .solvers import (
    ChatCompletionsSolver,
    CostModel,
    EndpointConfig,
    MockSolver,
    ReplaySolver,
    SamplePool,
    load_pools,
)
from .stopping import Rule, make_policy, parse_rule

log = logging.getLogger("modestop")

PROG = "modestop"
BUILTIN_PREFIX = "builtin:"


def _bool(text: str | bool) -> bool:
    if isinstance(text, bool):
        return text
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _positive_int(text: str | int) -> int:
    value = int(text)
    if value < 1:
        raise ValueError(f"expected a positive integer, got {text!r}")
    return value


@dataclass(frozen=True)
class Option:
    name: str
    type: Callable[[Any], Any]
    default: Any
    help: str
    commands: tuple[str, ...]
    choices: Optional[tuple[str, ...]] = None


_POLICY_CMDS = ("run", "simulate", "sweep")
_ALL = ("run", "simulate", "sweep", "report")

OPTIONS: tuple[Option, ...] = (
    Option("policy", str, "msprt", "stopping rule: self-consistency, pvalue, adacons, sprt, msprt",
           ("run", "simulate")),
    Option("family", str, "msprt", "rule family to sweep", ("sweep",)),
    Option("grid", str, "paper", "'paper' (reference grid) or comma-separated values", ("sweep",)),
    Option("label", str, "", "policy label written to results (default: rule name)", _POLICY_CMDS),
    Option("max-samples", int, None, "sample cap (default: 40 for baselines, 256 for SPRT/mSPRT)",
           _POLICY_CMDS),
    Option("fixed-n", int, None, "self-consistency sample count", _POLICY_CMDS),
    Option("alpha-sig", float, None, "p-value significance level", _POLICY_CMDS),
    Option("confidence", float, None, "AdaCons confidence threshold", _POLICY_CMDS),
    Option("p1", float, None, "SPRT alternative success probability", _POLICY_CMDS),
    Option("alpha", float, None, "SPRT/mSPRT type I error", _POLICY_CMDS),
    Option("beta", float, None, "SPRT/mSPRT type II error", _POLICY_CMDS),
    Option("prior-alpha0", float, None, "mSPRT Beta prior alpha0", _POLICY_CMDS),
    Option("prior-beta0", float, None, "mSPRT Beta prior beta0", _POLICY_CMDS),
    Option("truncate-prior", _bool, None, "mSPRT: truncate the prior to (0.5, 1]", _POLICY_CMDS),
    Option("dataset", str, None, "dataset JSONL file", ("run",)),
    Option("solver", str, "mock", "answer source", ("run",), ("mock", "replay", "chat")),
    Option("pools", str, None,
           "sample-pool JSONL, or builtin:NAME (run: mock/replay source; simulate/sweep: input)",
           ("run", "simulate", "sweep")),
    Option("replay-mode", str, "with_replacement", "replay order", ("run",),
           ("with_replacement", "sequential")),
    Option("mock-p-correct", float, 0.6, "mock without pools: probability of the gold answer",
           ("run",)),
    Option("mock-distractors", _positive_int, 3, "mock without pools: number of wrong answers",
           ("run",)),
    Option("prompt-tokens", int, 100, "offline solvers: prompt tokens per sample", ("run",)),
    Option("completion-tokens", int, 1000, "offline solvers: completion tokens per sample",
           ("run",)),
    Option("results", str, None, "results JSONL (default: OUT_DIR/results-LABEL.jsonl)", ("run",)),
    Option("parallel-questions", _positive_int, 4, "problems run concurrently", ("run",)),
    Option("max-in-flight", int, None, "cap on concurrent queries per problem", ("run",)),
    Option("base-url", str, EndpointConfig.base_url, "chat-completions server", ("run",)),
    Option("model", str, EndpointConfig.model, "model name", ("run",)),
    Option("reasoning-effort", str, None, "low, medium or high", ("run",)),
    Option("temperature", float, None, "sampling temperature", ("run",)),
    Option("api-key-env", str, EndpointConfig.api_key_env,
           "name of the environment variable holding the API key", ("run",)),
    Option("timeout", float, EndpointConfig.timeout_s, "request timeout in seconds", ("run",)),
    Option("max-attempts", _positive_int, EndpointConfig.max_attempts, "attempts per query",
           ("run",)),
    Option("reasoning-tokens-separate", _bool, False,
           "server reports reasoning tokens outside completion tokens", ("run",)),
    Option("trials", _positive_int, 1000, "Monte Carlo trials per question", ("simulate", "sweep")),
    Option("seed", int, 0, "master seed", _POLICY_CMDS),
    Option("baseline", str, "self-consistency", "policy label used as token baseline", ("report",)),
    Option("completion-only", _bool, False, "count only completion tokens", ("report",)),
    Option("out-dir", str, "out", "output directory", _ALL),
    Option("out", str, None, "output CSV (default: inside OUT_DIR)", ("simulate", "sweep")),
)

_BY_KEY = {o.name.replace("-", "_"): o for o in OPTIONS}
_POLICY_PARAMS = (
    "max_samples", "fixed_n", "alpha_sig", "confidence", "p1", "alpha", "beta",
    "prior_alpha0", "prior_beta0", "truncate_prior", "label",
)
# Where a file goes does not change what is in it; these stay out of the
# embedded config so identical runs give identical bytes.
_LOCATION_KEYS = frozenset({"out_dir", "out", "results", "config"})
_SECRET_HINTS = ("api_key", "apikey", "token", "secret", "password")


class CliError(Exception):
    """A user-facing error: printed as one line, exit status 1."""


class _Parser(argparse.ArgumentParser):
    # No prefix matching: "--api-key" must not resolve to "--api-key-env".
    def __init__(self, *args: Any, **kwargs: Any) -> None:
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message: str) -> None:  # type: ignore[override]
        self.exit(2, f"{self.prog}: error: {message}\n")


def _flag_type(option: Option) -> Callable[[str], Any]:
    def convert(text: str) -> Any:
        try:
            return option.type(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    convert.__name__ = option.type.__name__.lstrip("_")
    return convert


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Adaptive early stopping for majority-vote sampling.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "run": "run a policy over a dataset and append results",
        "simulate": "Monte Carlo consistency of one policy on sample pools",
        "sweep": "operating-characteristic sweep of one rule family",
        "report": "summary tables from results files",
    }
    for command in _ALL:
        p = sub.add_parser(command, help=helps[command], description=helps[command])
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if command == "report":
            p.add_argument("results_files", nargs="+", metavar="RESULTS",
                           help="results JSONL files written by 'run'")
        for o in OPTIONS:
            if command not in o.commands:
                continue
            kwargs: dict[str, Any] = {"dest": o.name.replace("-", "_"), "default": argparse.SUPPRESS}
            if o.type is _bool:
                kwargs["nargs"] = "?"
                kwargs["const"] = True
            if o.choices:
                kwargs["choices"] = o.choices
            default = "none" if o.default is None else o.default
            p.add_argument(f"--{o.name}", type=_flag_type(o), help=f"{o.help} [{default}]", **kwargs)
    return parser


def read_config_file(path: str) -> dict[str, str]:
    """Parse a flat ``key = value`` file into a dict of raw strings."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    try:
        cp.read_string("[config]\n" + text, source=path)
    except configparser.Error as exc:
        first = str(exc).splitlines()[0]
        raise CliError(f"config file {path} is not flat key = value: {first}") from None
    return {k.replace("-", "_"): v for k, v in cp["config"].items()}


def resolve_config(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Fully explicit settings for ``command``: flag, then config file, then default."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key in file_values:
        if key in _BY_KEY:
            continue
        if any(h in key for h in _SECRET_HINTS):
            raise CliError(
                f"config key {key!r} looks like a credential; put secrets in the environment"
            )
        raise CliError(f"unknown config key {key!r} in {args.config}")
    resolved: dict[str, Any] = {"command": command}
    for key, option in _BY_KEY.items():
        if command not in option.commands:
            continue
        if hasattr(args, key):
            resolved[key] = getattr(args, key)
        elif key in file_values:
            try:
                resolved[key] = option.type(file_values[key])
            except ValueError as exc:
                raise CliError(f"config key {key!r}: {exc}") from None
        else:
            resolved[key] = option.default
    if command == "report":
        resolved["results_files"] = list(args.results_files)
    return resolved


def _metadata(config: dict[str, Any], policy: Optional[dict[str, Any]] = None) -> dict[str, Any]:
    """Resolved settings for output headers; ``policy`` replaces the raw policy flags."""
    skip = _LOCATION_KEYS | (set(_POLICY_PARAMS) if policy is not None else set())
    resolved = {k: v for k, v in sorted(config.items()) if k not in skip}
    if policy is not None:
        resolved["policy"] = policy
    return {"tool": PROG, "version": __version__, "config": resolved}


def _policy_params(config: dict[str, Any]) -> dict[str, Any]:
    return {k: config[k] for k in _POLICY_PARAMS if k in config and config[k] not in (None, "")}


def _load_pools(spec: Optional[str]) -> list[SamplePool]:
    if spec is None:
        raise CliError("--pools is required here")
    if spec.startswith(BUILTIN_PREFIX):
        name = spec[len(BUILTIN_PREFIX):]
        try:
            return bundled_pools(name)
        except FileNotFoundError:
            raise CliError(f"no bundled pool file named {name!r}") from None
    if not Path(spec).is_file():
        raise CliError(f"pool file not found: {spec}")
    return load_pools(spec)


def _default_mock_dist(gold: Optional[str], p_correct: float, n_wrong: int) -> dict[str, float]:
    if not 0.0 <= p_correct <= 1.0:
        raise CliError(f"--mock-p-correct must be in [0, 1], got {p_correct}")
    right = gold if gold is not None else "answer"
    dist = {right: p_correct}
    for i in range(n_wrong):
        dist[f"{right}-wrong-{i + 1}"] = (1.0 - p_correct) / n_wrong
    return {k: v for k, v in dist.items() if v > 0}


def _build_solver(config: dict[str, Any], dataset: Any) -> Any:
    cost = CostModel(prompt_tokens=config["prompt_tokens"],
                     completion_tokens=config["completion_tokens"])
    kind = config["solver"]
    if kind == "mock":
        per_problem: dict[str, dict[str, float]] = {}
        if config["pools"] is not None:
            for pool in _load_pools(config["pools"]):
                per_problem[pool.question_id] = estimate_distribution(pool).probs
        for problem in dataset.problems:
            per_problem.setdefault(
                problem.id,
                _default_mock_dist(problem.gold_answer, config["mock_p_correct"],
                                   config["mock_distractors"]),
            )
        if not per_problem:
            per_problem["-"] = {"answer": 1.0}
        return MockSolver(per_problem=per_problem, seed=config["seed"], cost=cost)
    if kind == "replay":
        return ReplaySolver(_load_pools(config["pools"]), mode=config["replay_mode"],
                            seed=config["seed"], cost=cost)
    api_key = os.environ.get(config["api_key_env"])
    if not api_key:
        raise CliError(f"environment variable {config['api_key_env']} is not set (needed for --solver chat)")
    endpoint = EndpointConfig(
        base_url=config["base_url"],
        model=config["model"],
        reasoning_effort=config["reasoning_effort"],
        temperature=config["temperature"],
        api_key_env=config["api_key_env"],
        timeout_s=config["timeout"],
        max_attempts=config["max_attempts"],
        max_in_flight=config["max_in_flight"],
        reasoning_tokens_separate=config["reasoning_tokens_separate"],
    )
    return ChatCompletionsSolver(endpoint, api_key=api_key)


def cmd_run(config: dict[str, Any]) -> int:
    if config["dataset"] is None:
        raise CliError("--dataset is required for run")
    if not Path(config["dataset"]).is_file():
        raise CliError(f"dataset file not found: {config['dataset']}")
    dataset = load_dataset(config["dataset"])
    policy = make_policy(config["policy"], **_policy_params(config))
    results_path = config["results"] or os.path.join(
        config["out_dir"], f"results-{policy.label}.jsonl"
    )
    solver = _build_solver(config, dataset)

    async def go() -> list[Any]:
        try:
            return await run_benchmark(
                dataset, policy, solver, config["parallel_questions"], results_path,
                max_in_flight=config["max_in_flight"],
                metadata=_metadata(config, policy.to_dict()),
            )
        finally:
            if isinstance(solver, ChatCompletionsSolver):
                await solver.aclose()

    results = asyncio.run(go())
    n_err = sum(1 for r in results if r.error is not None)
    print(f"{len(results)} problems, {sum(r.n_samples for r in results)} samples, "
          f"{n_err} errors -> {results_path}")
    return 0


def cmd_simulate(config: dict[str, Any]) -> int:
    import csv

    pools = _load_pools(config["pools"])
    policy = make_policy(config["policy"], **_policy_params(config))
    out = config["out"] or os.path.join(config["out_dir"], f"simulate-{policy.label}.csv")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write("# " + json.dumps(_metadata(config, policy.to_dict()), sort_keys=True) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["question", "policy", "trials", "avg_runs", "consistency", "hit_gold"])
        for pool in pools:
            dist = estimate_distribution(pool)
            s = simulate_question(dist, policy, config["trials"], config["seed"])
            hit = "" if s.hit_gold is None else repr(s.hit_gold)
            writer.writerow([pool.question_id, policy.label, s.trials, repr(s.avg_runs),
                             repr(s.consistency), hit])
            print(f"{pool.question_id}: avg_runs={s.avg_runs:.3f} consistency={s.consistency:.4f}")
    print(f"wrote {out}")
    return 0


def _parse_grid(text: str, rule: Rule) -> list[float]:
    if text.strip().lower() == "paper":
        return list(REFERENCE_GRIDS[rule])
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--grid must be 'paper' or comma-separated numbers, got {text!r}") from None
    if not values:
        raise CliError("--grid is empty")
    return values


def cmd_sweep(config: dict[str, Any]) -> int:
    rule = parse_rule(config["family"])
    grid = _parse_grid(config["grid"], rule)
    pools = _load_pools(config["pools"] or BUILTIN_PREFIX + "synthetic_suite")
    if config["pools"] is None:
        config = dict(config, pools=BUILTIN_PREFIX + "synthetic_suite")
    base = _policy_params(config)
    base.pop(SWEEP_PARAM[rule], None)
    points = sweep(pools, rule, grid, config["trials"], config["seed"], **base)
    # Policy settings other than the swept parameter, with defaults filled in.
    fixed = family_policy(rule, grid[0], **base).to_dict()
    fixed[SWEEP_PARAM[rule]] = grid
    out = config["out"] or os.path.join(config["out_dir"], f"sweep-{rule.value}.csv")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out, points, _metadata(config, fixed))
    for p in points:
        print(f"{SWEEP_PARAM[rule]}={p.param_value:g} avg_runs={p.avg_runs:.3f} "
              f"consistency={p.consistency:.4f}")
    print(f"wrote {out}")
    return 0


def cmd_report(config: dict[str, Any]) -> int:
    datasets: dict[str, list[Any]] = {}
    sources = []
    for path in config["results_files"]:
        if not Path(path).is_file():
            raise CliError(f"results file not found: {path}")
        header, results = read_results(path)
        name = header.get("dataset") or Path(path).stem
        datasets.setdefault(name, []).extend(results)
        sources.append({"dataset": name, "policy": header.get("policy"),
                        "version": header.get("version")})
    meta = _metadata(config)
    meta["sources"] = sources
    paths = emit_report(datasets, config["baseline"], config["out_dir"],
                        completion_only=config["completion_only"], metadata=meta)
    with open(paths.table_txt, encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    print(f"wrote {paths.summary_csv}, {paths.stats_csv}, {paths.table_txt}")
    return 0


COMMANDS = {"run": cmd_run, "simulate": cmd_simulate, "sweep": cmd_sweep, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = resolve_config(args.command, args)
        return COMMANDS[args.command](config)
    except CliError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
    except (ValueError, KeyError, OSError) as exc:
        msg = str(exc).strip("'\"") if isinstance(exc, KeyError) else str(exc)
        print(f"{PROG}: error: {msg}", file=sys.stderr)
    return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
