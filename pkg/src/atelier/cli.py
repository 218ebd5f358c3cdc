"""Command-line entry point: ``atelier validate|list|run|ablate|stub-server``."""

from __future__ import annotations

import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import click
import tomli

from .graph import ParseError, load_workflow, validate_dag
from .swi import LibraryError, fixture_library, load_library_file

log = logging.getLogger("atelier")

EXIT_OK, EXIT_UNRESOLVED, EXIT_CONFIG, EXIT_UNREACHABLE = 0, 1, 2, 3

CONFIG_FILE = "atelier.toml"

# setting -> (default, coercion)
SETTINGS: dict[str, tuple[Any, Any]] = {
    "backend": ("sim", str),
    "adapters": (None, str),
    "library": (None, str),
    "sim_profile": (None, str),
    "max_depth": (6, int),
    "max_children": (3, int),
    "max_expansions": (24, int),
    "threshold": ("normal", str),
    "seed": (0, int),
    "timeout": (600.0, float),
    "out": ("runs", str),
}


class ConfigError(click.ClickException):
    exit_code = EXIT_CONFIG


def _read_config_file(path: Path | None) -> dict[str, Any]:
    path = path or Path(CONFIG_FILE)
    if not path.is_file():
        return {}
    try:
        data = tomli.loads(path.read_text(encoding="utf-8"))
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    # settings may sit at top level or under [run]
    return {**{k: v for k, v in data.items() if not isinstance(v, dict)}, **data.get("run", {})}


def resolve_settings(cli: dict[str, Any], config_path: Path | None = None, env=os.environ) -> dict[str, Any]:
    """CLI flags > ATELIER_* environment > atelier.toml > defaults."""
    file_values = _read_config_file(config_path)
    out = {}
    for key, (default, cast) in SETTINGS.items():
        env_key = f"ATELIER_{key.upper()}"
        if cli.get(key) is not None:
            value = cli[key]
        elif env_key in env:
            value = env[env_key]
        elif key.replace("_", "-") in file_values or key in file_values:
            value = file_values.get(key, file_values.get(key.replace("_", "-")))
        else:
            value = default
        try:
            out[key] = cast(value) if value is not None else None
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return out


def _library(path: str | None):
    try:
        return load_library_file(path) if path else fixture_library()
    except (OSError, LibraryError) as exc:
        raise ConfigError(f"cannot load library: {exc}") from None


@dataclass
class RunConfig:
    backend: Any
    agents: Any
    library: Any
    plan: Any
    run_dir: Path
    seed: int


def build_run_config(settings: dict[str, Any]) -> RunConfig:
    from .agents.base import AdapterFailure, AgentBundle
    from .agents.remote import (
        ChatClient,
        RemoteAnnotator,
        RemoteEvaluator,
        RemotePlanner,
        RemotePreprocessor,
        load_prompts,
    )
    from .agents.scenario import ScenarioError, load_scenario_bundle
    from .backends import RemoteBackend, SimProfile, SimulatedBackend
    from .planning import PlanConfig

    try:
        plan = PlanConfig(
            max_depth=settings["max_depth"],
            max_children_per_node=settings["max_children"],
            max_total_expansions=settings["max_expansions"],
            evaluation_threshold=settings["threshold"],
            job_timeout=settings["timeout"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    library = _library(settings["library"])
    seed = settings["seed"]
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = Path(settings["out"]) / f"{stamp}-s{seed}"
    n = 1
    while run_dir.exists():
        run_dir = Path(settings["out"]) / f"{stamp}-s{seed}-{n}"
        n += 1
    artifacts = run_dir / "artifacts"

    backend_spec = settings["backend"]
    if backend_spec == "sim":
        if settings["sim_profile"]:
            try:
                data = json.loads(Path(settings["sim_profile"]).read_text(encoding="utf-8"))
                profile = SimProfile.from_json({**data, "seed": data.get("seed", seed)})
            except (OSError, ValueError, TypeError) as exc:
                raise ConfigError(f"bad simulation profile: {exc}") from None
        else:
            profile = SimProfile.uniform(1.0, 0.9, seed=seed)
        backend = SimulatedBackend(profile, artifacts)
    elif backend_spec.startswith("remote:"):
        backend = RemoteBackend(backend_spec[len("remote:"):], settings["timeout"], output_dir=artifacts)
    else:
        raise ConfigError(f"unknown backend {backend_spec!r}; use sim or remote:<url>")

    adapters = settings["adapters"]
    if not adapters:
        raise ConfigError("no adapters selected; use --adapters mock:<scenario.yaml> or remote")
    if adapters.startswith("mock:"):
        try:
            agents = load_scenario_bundle(adapters[len("mock:"):])
        except ScenarioError as exc:
            raise ConfigError(str(exc)) from None
    elif adapters == "remote":
        try:
            client = ChatClient()
        except AdapterFailure as exc:
            raise ConfigError(str(exc)) from None
        prompts = load_prompts()
        agents = AgentBundle(
            RemotePlanner(client, prompts),
            RemoteAnnotator(client, prompts),
            RemoteEvaluator(client, prompts),
            RemotePreprocessor(client, prompts),
        )
    else:
        raise ConfigError(f"unknown adapters {adapters!r}; use mock:<file> or remote")
    return RunConfig(backend, agents, library, plan, run_dir, seed)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Plan and run multi-stage visual generation tasks over a library of atomic workflows."""
    logging.basicConfig(level=logging.INFO if verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("file", type=click.Path(dir_okay=False))
def validate(file: str) -> None:
    """Check an API-format workflow file; prints one FINDING line per problem."""
    try:
        graph = load_workflow(file)
    except OSError as exc:
        raise ConfigError(f"cannot read {file}: {exc}") from None
    except ParseError as exc:
        click.echo(f"PARSE-ERROR {exc.kind} {exc.where}: {exc}")
        sys.exit(1)
    report = validate_dag(graph)
    for finding in report.findings:
        click.echo(finding.line())
    sys.exit(0 if report.ok else 1)


@main.command("list")
@click.option("--library", "library_path", type=click.Path(dir_okay=False), default=None,
              help="Descriptor document (default: the bundled library).")
def list_(library_path: str | None) -> None:
    """List the atomic workflows of a library, one per line."""
    for d in _library(library_path).descriptors():
        click.echo(f"{d.name}\t{d.task_kind.value}\t{d.description.splitlines()[0] if d.description else ''}")


@main.command()
@click.option("--task", required=True, help="The instruction to resolve.")
@click.option("--input", "inputs", multiple=True, type=click.Path(exists=True, dir_okay=False),
              help="Input artifact (repeatable).")
@click.option("--backend", default=None, help="sim | remote:<url>")
@click.option("--adapters", default=None, help="mock:<scenario.yaml> | remote")
@click.option("--library", default=None, type=click.Path(dir_okay=False))
@click.option("--sim-profile", default=None, type=click.Path(dir_okay=False), help="JSON simulation profile.")
@click.option("--max-depth", type=int, default=None)
@click.option("--max-children", type=int, default=None)
@click.option("--max-expansions", type=int, default=None)
@click.option("--threshold", type=click.Choice(["strict", "normal", "lenient"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--timeout", type=float, default=None, help="Per-job timeout in seconds.")
@click.option("--out", default=None, help="Directory that receives run folders (default: runs).")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help=f"Config file (default: ./{CONFIG_FILE} if present).")
@click.option("--json", "as_json", is_flag=True, help="Print a machine-readable summary.")
def run(task: str, inputs: tuple[str, ...], config_path: str | None, as_json: bool, **flags: Any) -> None:
    """Resolve one task. Exit 0 resolved, 1 unresolved, 2 config error, 3 backend unreachable."""
    from .backends import BackendUnreachable, RemoteBackend
    from .planning import TaskRunner

    settings = resolve_settings(flags, Path(config_path) if config_path else None)
    cfg = build_run_config(settings)
    try:
        if isinstance(cfg.backend, RemoteBackend):
            cfg.backend.ping()
        result = TaskRunner(cfg.library, cfg.agents, cfg.backend, cfg.plan, cfg.run_dir).run(task, inputs)
    except BackendUnreachable as exc:
        click.echo(f"error: backend unreachable: {exc}", err=True)
        sys.exit(EXIT_UNREACHABLE)
    click.echo(f"trace: {cfg.run_dir / 'trace.jsonl'}", err=True)
    click.echo(f"workspace: {cfg.run_dir / 'workspace.json'}", err=True)
    if as_json:
        click.echo(json.dumps(result.summary(), sort_keys=True))
    else:
        click.echo(f"status: {result.status}")
        for path in result.artifacts:
            click.echo(path)
    sys.exit(EXIT_OK if result.resolved else EXIT_UNRESOLVED)


@main.command()
@click.option("--suite", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Suite file (YAML or JSON); default: 20 generated 3-step tasks at success 0.7.")
@click.option("--reps", type=int, default=500, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the report JSON here.")
def ablate(suite: str | None, reps: int, seed: int, out: str | None) -> None:
    """Compare the full planner against the no-tree and no-feedback variants on the simulator."""
    import yaml

    from .ablation import SyntheticTaskSuite, run_ablation

    if reps < 100:
        raise ConfigError("--reps must be at least 100")
    try:
        if suite:
            data = yaml.safe_load(Path(suite).read_text(encoding="utf-8")) or {}
            task_suite = SyntheticTaskSuite.from_json(data)
        else:
            task_suite = SyntheticTaskSuite.generate(seed=seed)
    except (OSError, ValueError, KeyError, TypeError, yaml.YAMLError) as exc:
        raise ConfigError(f"bad suite: {exc}") from None
    report = run_ablation(task_suite, repetitions=reps, seed=seed)
    text = report.dumps()
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
        click.echo(f"report: {out}", err=True)
    click.echo(text)
    for worse in ("no-tree", "no-feedback"):
        if worse in report.stats and "full" in report.stats:
            z, p = report.compare("full", worse)
            click.echo(f"full vs {worse}: z={z:.3f} p={p:.3g}", err=True)


@main.command("stub-server")
@click.option("--port", type=int, default=8188, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--script", "script", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Scenario file (YAML).")
def stub_server(port: int, host: str, script: str | None) -> None:
    """Serve the scripted ComfyUI-protocol stub until interrupted."""
    from .backends.stub import load_scenario, serve_forever

    scenario = load_scenario(script) if script else {"mode": "complete"}
    click.echo(f"stub server on http://{host}:{port} (mode {scenario.get('mode', 'complete')})", err=True)
    serve_forever(scenario, host, port)


if __name__ == "__main__":
    main()
