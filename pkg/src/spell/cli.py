"""Command-line entry point.

Commands: `corpus build`, `loop run`, `sim run` (loop with the simulated
backend forced), `eval run`. Every command resolves one layered config
(defaults < file < --set overrides; SPELL_CONFIG names the default file) and
writes a manifest capturing the exact inputs: config digest, seeds, template
digests, tokenizer, package version.

Exit codes: 0 success; 2 usage or config problem; 3 environmental failure
(backend, exhausted corpus, bad checkpoint or artifact); 4 internal
invariant breach.
"""

from __future__ import annotations

import json
import os
import sys
from typing import Callable

import click

from . import __version__
from .backends.base import ApproxCharTokenizer
from .config import (
    config_digest,
    load_config,
    loop_config_from,
    make_backend,
    reward_config_from,
)
from .corpus.store import CorpusStore, build_corpus_store
from .errors import (
    BackendError,
    ConfigError,
    CorpusExhausted,
    DegenerateGroup,
    DomainError,
    IntegrityError,
    RestoreError,
    ShapeError,
)
from .evaluation import load_eval_dataset, run_eval
from .orchestrator import LoopRunner
from .prompts import template_digests
from .types import RawDocument

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ENVIRONMENT = 3
EXIT_INVARIANT = 4


def _config_options(fn: Callable) -> Callable:
    fn = click.option(
        "--config",
        "-c",
        "config_path",
        envvar="SPELL_CONFIG",
        default=None,
        type=click.Path(dir_okay=False),
        help="YAML config file (default: $SPELL_CONFIG when set).",
    )(fn)
    fn = click.option(
        "--set",
        "overrides",
        multiple=True,
        metavar="KEY=VALUE",
        help="Override a config key, e.g. --set loop.batch_size=4.",
    )(fn)
    return fn


def _execute(action: Callable[[], None]) -> None:
    try:
        action()
    except ConfigError as exc:
        _fail(EXIT_USAGE, str(exc))
    except (BackendError, CorpusExhausted, RestoreError, IntegrityError) as exc:
        _fail(EXIT_ENVIRONMENT, str(exc))
    except (DomainError, ShapeError, DegenerateGroup, AssertionError) as exc:
        _fail(EXIT_INVARIANT, str(exc))


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _resolve_config(config_path: str | None, overrides: tuple[str, ...]) -> dict:
    if config_path and not os.path.exists(config_path):
        raise ConfigError(f"config file not found: {config_path}")
    return load_config(config_path, overrides)


def _write_manifest(path: str, command: str, config: dict) -> None:
    manifest = {
        "command": command,
        "config_digest": config_digest(config),
        "effective_config": config,
        "seeds": {
            "corpus": config["corpus"]["seed"],
            "loop": config["loop"]["seed"],
            "sim": config["sim"]["seed"],
        },
        "template_digests": template_digests(),
        "tokenizer": ApproxCharTokenizer().name,
        "package_version": __version__,
    }
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(manifest, handle, sort_keys=True, indent=2)
        handle.write("\n")
    os.replace(tmp_path, path)


def _load_documents(path: str, what: str) -> list[RawDocument]:
    if not os.path.exists(path):
        raise ConfigError(f"{what} file not found: {path}")
    docs: list[RawDocument] = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IntegrityError(f"{path}:{lineno}: bad JSON: {exc}") from exc
            try:
                docs.append(
                    RawDocument(
                        doc_id=str(obj["doc_id"]),
                        text=str(obj["text"]),
                        quality=float(obj.get("quality", 1.0)),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise IntegrityError(f"{path}:{lineno}: bad document: {exc}") from exc
    return docs


@click.group()
@click.version_option(version=__version__, prog_name="spell")
def main() -> None:
    """Self-play rollout engine: corpus prep, training loop, evaluation."""


@main.group()
def corpus() -> None:
    """Corpus preparation."""


@corpus.command("build")
@_config_options
def corpus_build(config_path: str | None, overrides: tuple[str, ...]) -> None:
    """Filter, dedup, embed, and cluster raw documents into a corpus store."""

    def action() -> None:
        config = _resolve_config(config_path, overrides)
        section = config["corpus"]
        if not section["input"]:
            raise ConfigError("corpus.input must point to a JSONL document file")
        docs = _load_documents(section["input"], "corpus.input")
        contaminants = (
            _load_documents(section["contaminants"], "corpus.contaminants")
            if section["contaminants"]
            else []
        )
        backend = make_backend(config)
        store = build_corpus_store(
            docs,
            section["store"],
            embed_fn=backend.embed,
            contaminants=contaminants,
            min_chars=section["min_chars"],
            max_chars=section["max_chars"],
            min_quality=section["min_quality"],
            dedup_threshold=section["dedup_threshold"],
            num_perm=section["num_perm"],
            shingle_size=section["shingle_size"],
            target_clusters=section["target_clusters"] or None,
            mean_cluster_size=section["mean_cluster_size"],
            branching=section["branching"],
            seed=section["seed"],
            domain_label=section["domain_label"],
            embedding_source=config["backend"]["kind"],
        )
        counts = store.manifest["counts"]
        click.echo(
            f"input {counts['input']} -> filtered {counts['filtered']} -> "
            f"deduped {counts['deduped']} -> clusters {counts['clusters']}"
        )
        _write_manifest(
            os.path.join(section["store"], "run_manifest.json"), "corpus build", config
        )
        click.echo(f"store written to {section['store']}")

    _execute(action)


def _run_loop(config: dict, resume: str | None, steps: int | None) -> None:
    loop_section = config["loop"]
    store = CorpusStore.load(config["corpus"]["store"])
    backend = make_backend(config)
    sink_dir = loop_section["sink_dir"]
    checkpoint = loop_section["checkpoint"] or os.path.join(sink_dir, "checkpoint.json")
    runner = LoopRunner(
        store,
        backend,
        loop_config_from(config),
        reward_config_from(config),
        sink_dir=sink_dir,
        checkpoint_path=checkpoint,
        webhook_url=config["trainer"]["webhook_url"] or None,
        webhook_retries=config["trainer"]["retries"],
        config_digest=config_digest(config),
    )
    if resume:
        runner.resume(resume)
        click.echo(f"resumed from {resume} at step {runner.state.step_completed}")
    total = steps if steps is not None else loop_section["steps"]
    os.makedirs(sink_dir, exist_ok=True)
    _write_manifest(os.path.join(sink_dir, "run_manifest.json"), "loop run", config)
    for _ in range(total):
        report = runner.run_training_step()
        click.echo(
            f"step {report['step']}: committed {report['instances']['committed']} "
            f"instances, kept {report['selection']['kept_res_groups']} groups, "
            f"emitted {report['emitted_records']} records"
        )
    click.echo(f"{total} step(s) written to {sink_dir}")


@main.group()
def loop() -> None:
    """Self-play training loop."""


@loop.command("run")
@_config_options
@click.option("--resume", "resume", type=click.Path(dir_okay=False), default=None,
              help="Checkpoint file to resume from.")
@click.option("--steps", "steps", type=int, default=None,
              help="Steps to run (overrides loop.steps).")
def loop_run(
    config_path: str | None,
    overrides: tuple[str, ...],
    resume: str | None,
    steps: int | None,
) -> None:
    """Run training steps against the configured backend."""

    def action() -> None:
        config = _resolve_config(config_path, overrides)
        _run_loop(config, resume, steps)

    _execute(action)


@main.group()
def sim() -> None:
    """Simulated closed-loop runs."""


@sim.command("run")
@_config_options
@click.option("--resume", "resume", type=click.Path(dir_okay=False), default=None,
              help="Checkpoint file to resume from.")
@click.option("--steps", "steps", type=int, default=None,
              help="Steps to run (overrides loop.steps).")
def sim_run(
    config_path: str | None,
    overrides: tuple[str, ...],
    resume: str | None,
    steps: int | None,
) -> None:
    """Run the loop with the scripted backend regardless of backend.kind."""

    def action() -> None:
        config = _resolve_config(config_path, overrides)
        config["backend"] = dict(config["backend"], kind="simulated")
        _run_loop(config, resume, steps)

    _execute(action)


@main.group(name="eval")
def eval_group() -> None:
    """Benchmark evaluation."""


@eval_group.command("run")
@_config_options
@click.option("--dataset", "dataset_path", required=True,
              type=click.Path(dir_okay=False), help="JSONL dataset of eval items.")
@click.option("--out", "out_path", required=True,
              type=click.Path(dir_okay=False), help="Where to write the JSON report.")
def eval_run(
    config_path: str | None,
    overrides: tuple[str, ...],
    dataset_path: str,
    out_path: str,
) -> None:
    """Draw n samples per item, score with rule + judge, report pass@k."""

    def action() -> None:
        config = _resolve_config(config_path, overrides)
        if not os.path.exists(dataset_path):
            raise ConfigError(f"dataset file not found: {dataset_path}")
        dataset = load_eval_dataset(dataset_path)
        backend = make_backend(config)
        section = config["eval"]
        report = run_eval(
            dataset,
            backend,
            backend,
            n=section["n"],
            k_values=[int(k) for k in section["k"]],
            max_input_tokens=section["max_input_tokens"],
            temperature=section["temperature"],
            top_p=section["top_p"],
            max_tokens=section["max_tokens"],
            numeric_rel_tol=config["reward"]["numeric_rel_tol"],
        )
        os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
        tmp_path = out_path + ".tmp"
        with open(tmp_path, "w", encoding="utf-8", newline="\n") as handle:
            json.dump(report, handle, sort_keys=True, indent=2)
            handle.write("\n")
        os.replace(tmp_path, out_path)
        _write_manifest(out_path + ".manifest.json", "eval run", config)
        for name, value in sorted(report["aggregates"].items()):
            click.echo(f"{name}: {value:.6f}")
        click.echo(
            f"scored {report['scored_items']} items "
            f"({report['skipped_items']} skipped) -> {out_path}"
        )

    _execute(action)


if __name__ == "__main__":
    main()
