"""
docnav command line.

    docnav synth   --out CORPUS                       write a synthetic corpus
    docnav overview --corpus CORPUS --out DIR         render thumbnail overviews
    docnav run     --corpus CORPUS --out traj.jsonl   play every QA item
    docnav eval    --corpus CORPUS --trajectories traj.jsonl --out DIR
    docnav filter  --corpus CORPUS --trajectories traj.jsonl --out DIR
    docnav grpo    --groups groups.jsonl | --trajectories traj.jsonl --out adv.jsonl
    docnav inspect --trajectories traj.jsonl [--qa-id ID]

All inputs and outputs are files. Outputs are written in input order and embed the
resolved configuration, so reruns with the same seeds are byte-identical.
"""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import sys
from collections import Counter
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, TextIO, Tuple

from jinja2 import Template

from docnav import telemetry
from docnav.agents import make_agent_factory
from docnav.config import ConfigError, RunConfig, load_config_file, resolve_config
from docnav.corpus import Corpus, CorpusError, SynthSpec, load_corpus, synth_corpus, write_corpus
from docnav.environment import EpisodeRunner
from docnav.log_helper import configure_logging, log
from docnav.metrics import aggregate, build_record, prediction_rows
from docnav.overview import build_overview, overview_token_cost, write_overview
from docnav.protocol import Trajectory, render_action
from docnav.retrieval import make_provider
from docnav.trainpipe import (
    FilterDecision,
    TokenBatch,
    filter_trajectory,
    grpo_objective,
    group_advantages,
)
from docnav.types import FilterReason, TerminatedBy

INSPECT_TEMPLATE = Path(__file__).parent / "templates" / "trajectory.txt.j2"
TOKEN_FIELDS = ("logp_new", "logp_old", "mask")


class UsageError(Exception):
    pass


def dump_line(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def read_json_lines(path: Path) -> Iterator[Tuple[int, str]]:
    """(line number, text) of every non-blank line."""
    with Path(path).open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if line.strip():
                yield lineno, line


def read_trajectories(path: Path) -> Iterator[Trajectory]:
    for lineno, line in read_json_lines(path):
        try:
            yield Trajectory.from_json(json.loads(line))
        except (ValueError, KeyError, TypeError) as e:
            raise UsageError(f"{path}:{lineno}: not a trajectory: {e}") from e


def run_config_from_args(
    args: argparse.Namespace, fallback: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """Flags over --config file over `fallback` (a config recorded in an earlier output)."""
    file_values: Dict[str, Any] = dict(fallback or {})
    if getattr(args, "config", None) is not None:
        file_values = load_config_file(args.config)
    overrides = {
        key: getattr(args, key)
        for key in (
            "corpus",
            "agent",
            "retriever",
            "seed",
            "jobs",
            "max_turns",
            "group_capacity",
            "header_height",
            "retrieval_k",
            "use_overview",
            "use_working_memory",
            "image_mode",
            "image_dir",
            "connect_timeout",
            "turn_timeout",
            "tau",
            "tau_anls",
            "clip",
        )
        if getattr(args, key, None) is not None
    }
    if getattr(args, "actions", None) is not None:
        overrides["enabled_actions"] = [a.strip() for a in args.actions.split(",") if a.strip()]
    if "corpus" in overrides:
        overrides["corpus"] = str(overrides["corpus"])
    return resolve_config(file_values, overrides)


def corpus_from_config(config: RunConfig) -> Corpus:
    if config.corpus is None:
        raise UsageError("no corpus given, use --corpus or set 'corpus' in the config file")
    if not Path(config.corpus).is_dir():
        raise UsageError(f"corpus directory {config.corpus} does not exist")
    return load_corpus(Path(config.corpus))


#
# Commands
#


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        n_docs=args.n_docs,
        pages_min=args.pages_min,
        pages_max=args.pages_max if args.pages_max is not None else args.pages_min,
        facts_per_doc=args.facts_per_doc,
        multi_hop_fraction=args.multi_hop_fraction,
        unanswerable_fraction=args.unanswerable_fraction,
        identifier_fraction=args.identifier_fraction,
        rng_seed=args.seed,
    )
    corpus = synth_corpus(spec)
    out = Path(args.out)
    write_corpus(corpus, out)
    (out / "synth.json").write_text(
        json.dumps(dataclasses.asdict(spec), indent=2, sort_keys=True) + "\n"
    )

    kinds = Counter(str(qa.answer_kind) for qa in corpus.qa_items)
    print(
        f"wrote {len(corpus.documents)} documents, {corpus.n_pages()} pages, "
        f"{len(corpus.qa_items)} qa items to {out}"
    )
    for kind, count in sorted(kinds.items()):
        print(f"  {kind}: {count}")
    return 0


def cmd_overview(args: argparse.Namespace) -> int:
    config = run_config_from_args(args)
    corpus = corpus_from_config(config)
    doc_ids = args.doc or sorted(corpus.documents)
    for doc_id in doc_ids:
        if doc_id not in corpus.documents:
            raise UsageError(f"unknown document {doc_id}")
        overview = build_overview(
            corpus.document(doc_id), config.group_capacity, config.header_height
        )
        write_overview(overview, Path(args.out) / doc_id)
        full = corpus.document(doc_id).full_token_cost()
        cost = overview_token_cost(overview)
        print(f"{doc_id}: {overview.k} image(s), {cost} tokens (pages at full size: {full})")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = run_config_from_args(args)
    corpus = corpus_from_config(config)
    out = Path(args.out)
    image_dir = out.parent / f"{out.stem}_images"

    agent_factory = make_agent_factory(config.agent_spec(), config, image_dir=image_dir)
    rspec = config.retriever_spec()
    retrievers = make_provider(
        rspec.kind,
        flip_prob=rspec.flip_prob,
        rng_seed=rspec.seed,
        endpoint=rspec.endpoint,
        connect_timeout=config.connect_timeout,
        timeout=config.turn_timeout,
        k1=config.bm25_k1,
        b=config.bm25_b,
    )
    runner = EpisodeRunner(
        corpus,
        agent_factory,
        retrievers,
        config.env_config(),
        scorer=config.scorer(),
        jobs=config.jobs,
        run_config=config.to_json(),
    )

    outcomes: Counter[str] = Counter()
    try:
        with out.open("w", encoding="utf-8") as f:
            for traj in runner.run(corpus.qa_items):
                f.write(dump_line(traj.to_json()))
                outcomes[str(traj.terminated_by)] += 1
    finally:
        retrievers.close()
        close = getattr(agent_factory, "close", None)
        if close is not None:
            close()

    if args.metrics_file is not None:
        telemetry.write_metrics(args.metrics_file)
    summary = ", ".join(f"{k}={v}" for k, v in sorted(outcomes.items()))
    print(f"wrote {sum(outcomes.values())} trajectories to {out} ({summary})")
    if outcomes[str(TerminatedBy.ERROR)]:
        log.error(f"{outcomes[str(TerminatedBy.ERROR)]} episode(s) aborted on transport errors")
        return 1
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    trajectories = list(read_trajectories(args.trajectories))
    if not trajectories:
        raise UsageError(f"{args.trajectories} holds no trajectories")
    config = run_config_from_args(args, fallback=trajectories[0].run_config)
    corpus = corpus_from_config(config)
    qa_by_id = corpus.qa_by_id()

    records = []
    for traj in trajectories:
        qa = qa_by_id.get(traj.qa_id)
        if qa is None:
            raise UsageError(f"trajectory for unknown qa item {traj.qa_id}")
        records.append(
            build_record(
                traj,
                qa,
                corpus.document(qa.doc_id),
                scorer=config.scorer(),
                group_capacity=config.group_capacity,
                header_height=config.header_height,
                use_overview=config.use_overview,
            )
        )
    report = aggregate(records)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(
            {"config": config.to_json(), "report": report.to_json()}, indent=2, sort_keys=True
        )
        + "\n"
    )
    with (out / "predictions.jsonl").open("w", encoding="utf-8") as f:
        for row in prediction_rows(trajectories):
            f.write(dump_line(row))

    print(
        f"{report.n_episodes} episodes: accuracy {report.accuracy:.3f}, "
        f"page F1 {report.mean_page_f1:.3f}, avg pages {report.avg_pages:.2f}, "
        f"avg turns {report.avg_turns:.2f}"
    )
    return 0


def cmd_filter(args: argparse.Namespace) -> int:
    config = run_config_from_args(args)
    corpus = corpus_from_config(config)
    qa_by_id = corpus.qa_by_id()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    reasons: Counter[str] = Counter()
    with (out / "kept.jsonl").open("w", encoding="utf-8") as kept, (out / "rejected.jsonl").open(
        "w", encoding="utf-8"
    ) as rejected:
        for lineno, line in read_json_lines(args.trajectories):
            record: Dict[str, Any]
            try:
                traj = Trajectory.from_json(json.loads(line))
                qa = qa_by_id[traj.qa_id]
            except (ValueError, KeyError, TypeError) as e:
                log.warning(f"{args.trajectories}:{lineno}: unreadable trajectory: {e}")
                decision = FilterDecision(
                    keep=False, reason=FilterReason.FORMAT, anls=0.0, em=False, overlap=0
                )
                record = {"line": lineno, "raw": line.rstrip("\n")}
            else:
                decision = filter_trajectory(traj, qa, config.tau_anls)
                record = traj.to_json()
            record["filter"] = decision.to_json()
            (kept if decision.keep else rejected).write(dump_line(record))
            reasons[str(decision.reason)] += 1

    print(", ".join(f"{reason}: {count}" for reason, count in sorted(reasons.items())))
    return 0


def _trajectory_groups(path: Path) -> Iterator[Dict[str, Any]]:
    """Consecutive trajectories of one qa item form a rollout group."""
    for qa_id, group in itertools.groupby(read_trajectories(path), key=lambda t: t.qa_id):
        rewards = [(t.reward or {}).get("total", 0.0) for t in group]
        yield {"group_id": qa_id, "rewards": rewards}


def _group_lines(path: Path) -> Iterator[Dict[str, Any]]:
    for lineno, line in read_json_lines(path):
        try:
            group = json.loads(line)
        except ValueError as e:
            raise UsageError(f"{path}:{lineno}: not JSON: {e}") from e
        if not isinstance(group, dict) or not isinstance(group.get("rewards"), list):
            raise UsageError(f"{path}:{lineno}: group needs a 'rewards' list")
        group.setdefault("group_id", lineno)
        yield group


def group_tokens(group: Dict[str, Any]) -> Optional[TokenBatch]:
    """Per-token log-probs of a group, nested under 'tokens' or inline. None when absent."""
    tokens = group.get("tokens", group)
    if not isinstance(tokens, dict):
        raise ValueError("'tokens' must be an object with logp_new, logp_old and mask")
    missing = [k for k in TOKEN_FIELDS if k not in tokens]
    if len(missing) == len(TOKEN_FIELDS) and "tokens" not in group:
        return None
    if missing:
        raise ValueError(
            f"token log-probs need {', '.join(TOKEN_FIELDS)}, missing {', '.join(missing)}"
        )
    n_rewards = len(group["rewards"])
    for k in TOKEN_FIELDS:
        if len(tokens[k]) != n_rewards:
            raise ValueError(f"{n_rewards} rewards but {len(tokens[k])} sequences in {k}")
    return TokenBatch.from_lists(tokens["logp_new"], tokens["logp_old"], tokens["mask"])


def grpo_record(group: Dict[str, Any], clip: float, eps: float) -> Dict[str, Any]:
    advantages = group_advantages(group["rewards"], eps)
    record: Dict[str, Any] = {
        "group_id": group["group_id"],
        "rewards": group["rewards"],
        "advantages": advantages.tolist(),
    }
    batch = group_tokens(group)
    if batch is not None:
        record["objective"] = grpo_objective(batch, advantages, clip)
    return record


def cmd_grpo(args: argparse.Namespace) -> int:
    config = run_config_from_args(args)
    groups = (
        _trajectory_groups(args.trajectories)
        if args.trajectories
        else _group_lines(args.groups)
    )
    n = 0
    with Path(args.out).open("w", encoding="utf-8") as f:
        for group in groups:
            try:
                record = grpo_record(group, config.clip, config.eps)
            except (ValueError, KeyError, TypeError) as e:
                raise UsageError(f"group {group.get('group_id')}: {e}") from e
            f.write(dump_line(record))
            n += 1
    print(f"wrote advantages for {n} group(s) to {args.out}")
    return 0


def inspect_context(traj: Trajectory, corpus: Optional[Corpus]) -> Dict[str, Any]:
    turns: List[Dict[str, Any]] = []
    for rec in traj.turns:
        think = rec.turn.think if rec.turn is not None else None
        turns.append(
            {
                "t": rec.t,
                "format_error": rec.format_error,
                "action": render_action(rec.turn.action) if rec.turn is not None else None,
                "summary": think.summary if think is not None else None,
                "relevant_pages": (
                    list(think.relevant_pages)
                    if think and think.relevant_pages is not None
                    else None
                ),
                "feedback": rec.feedback.to_json(),
            }
        )
    context: Dict[str, Any] = {"traj": traj.to_json(), "turns": turns}
    qa = corpus.qa_by_id().get(traj.qa_id) if corpus is not None else None
    if qa is not None:
        context.update(
            question=qa.question, gold=list(qa.gold_answers), evidence=sorted(qa.evidence_pages)
        )
    return context


def render_inspect(traj: Trajectory, corpus: Optional[Corpus] = None) -> str:
    template = Template(INSPECT_TEMPLATE.read_text())
    return template.render(**inspect_context(traj, corpus)) + "\n"


def cmd_inspect(args: argparse.Namespace, stdout: Optional[TextIO] = None) -> int:
    out = stdout if stdout is not None else sys.stdout
    for traj in read_trajectories(args.trajectories):
        if args.qa_id is None or traj.qa_id == args.qa_id:
            corpus = load_corpus(args.corpus) if args.corpus is not None else None
            out.write(render_inspect(traj, corpus))
            return 0
    raise UsageError(f"no trajectory for {args.qa_id or 'any qa item'} in {args.trajectories}")


#
# Argument parsing
#


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, help="JSON or TOML config file")
    parser.add_argument("--corpus", type=Path, help="corpus directory")
    parser.add_argument(
        "--group-capacity", dest="group_capacity", type=int, help="pages per overview image"
    )
    parser.add_argument(
        "--header-height", dest="header_height", type=int, help="page number band height"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="docnav", description="Multi-page document QA agent harness"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="write a synthetic corpus with planted facts")
    synth.add_argument("--out", type=Path, required=True)
    synth.add_argument("--n-docs", dest="n_docs", type=int, default=20)
    synth.add_argument("--pages-min", dest="pages_min", type=int, default=12)
    synth.add_argument("--pages-max", dest="pages_max", type=int, help="defaults to --pages-min")
    synth.add_argument("--facts-per-doc", dest="facts_per_doc", type=int, default=4)
    synth.add_argument("--multi-hop-fraction", dest="multi_hop_fraction", type=float, default=0.0)
    synth.add_argument(
        "--unanswerable-fraction", dest="unanswerable_fraction", type=float, default=0.0
    )
    synth.add_argument("--identifier-fraction", dest="identifier_fraction", type=float, default=0.5)
    synth.add_argument("--seed", type=int, default=0)
    synth.set_defaults(func=cmd_synth)

    overview = sub.add_parser("overview", help="render thumbnail overview images")
    _add_config_flags(overview)
    overview.add_argument("--out", type=Path, required=True)
    overview.add_argument("--doc", action="append", help="document id, repeatable (default: all)")
    overview.set_defaults(func=cmd_overview)

    run = sub.add_parser("run", help="play every QA item and write trajectories")
    _add_config_flags(run)
    run.add_argument("--out", type=Path, required=True, help="trajectory JSONL file")
    run.add_argument("--agent", help="oracle | greedy | random[:<seed>] | bridge:<addr>")
    run.add_argument("--retriever", help="bm25 | oracle | noisy:<p>:<seed> | bridge:<addr>")
    run.add_argument("--max-steps", dest="max_turns", type=int, help="turn budget per episode")
    run.add_argument("--retrieval-k", dest="retrieval_k", type=int, help="fixed retrieval top-k")
    run.add_argument("--actions", help="comma separated enabled actions")
    run.add_argument("--no-overview", dest="use_overview", action="store_false", default=None)
    run.add_argument(
        "--no-working-memory", dest="use_working_memory", action="store_false", default=None
    )
    run.add_argument("--seed", type=int)
    run.add_argument("--jobs", type=int, help="parallel episodes")
    run.add_argument("--image-mode", dest="image_mode", choices=["path", "b64"])
    run.add_argument("--image-dir", dest="image_dir", help="where bridge page images are spooled")
    run.add_argument("--connect-timeout", dest="connect_timeout", type=float)
    run.add_argument("--turn-timeout", dest="turn_timeout", type=float)
    run.add_argument(
        "--metrics-file", dest="metrics_file", type=Path, help="Prometheus text output"
    )
    run.set_defaults(func=cmd_run)

    evaluate = sub.add_parser("eval", help="aggregate trajectories into a report")
    _add_config_flags(evaluate)
    evaluate.add_argument("--trajectories", type=Path, required=True)
    evaluate.add_argument("--out", type=Path, required=True, help="output directory")
    evaluate.add_argument("--tau", type=float, help="answer score threshold")
    evaluate.set_defaults(func=cmd_eval)

    filt = sub.add_parser("filter", help="split trajectories into kept and rejected")
    _add_config_flags(filt)
    filt.add_argument("--trajectories", type=Path, required=True)
    filt.add_argument("--out", type=Path, required=True, help="output directory")
    filt.add_argument("--tau-anls", dest="tau_anls", type=float)
    filt.set_defaults(func=cmd_filter)

    grpo = sub.add_parser("grpo", help="group advantages and clipped objectives")
    grpo.add_argument("--config", type=Path, help="JSON or TOML config file")
    source = grpo.add_mutually_exclusive_group(required=True)
    source.add_argument(
        "--groups",
        type=Path,
        help="JSONL of {group_id, rewards, [tokens: {logp_new, logp_old, mask}]}",
    )
    source.add_argument("--trajectories", type=Path, help="rollouts, grouped by consecutive qa_id")
    grpo.add_argument("--out", type=Path, required=True)
    grpo.add_argument("--clip", type=float)
    grpo.set_defaults(func=cmd_grpo)

    inspect = sub.add_parser("inspect", help="pretty-print one trajectory")
    inspect.add_argument("--trajectories", type=Path, required=True)
    inspect.add_argument("--qa-id", dest="qa_id")
    inspect.add_argument("--corpus", type=Path, help="show question and gold answers")
    inspect.set_defaults(func=cmd_inspect)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return int(args.func(args))
    except (UsageError, ConfigError, CorpusError) as e:
        parser.error(str(e))
    except OSError as e:
        parser.error(f"{e.filename or ''}: {e.strerror or e}")


if __name__ == "__main__":
    sys.exit(main())
