"""Command-line front end.

Every subcommand reads explicit files, writes explicit files, and drops a run
manifest (`<primary output>.manifest.json`) recording the resolved config, the
seed, and content digests of every input and output, so any artifact can be
traced back to exactly what produced it.

Exit codes: 0 success, 1 stage failure (categorized message on stderr),
2 usage/argument errors (argparse).
"""

import argparse
import datetime
import json
import logging
import os
import sys

import yaml

from . import core, curriculum, evalharness, rlengine, simlab, streamer, synthpipe, transferbench
from ._util import derive_seed, json_dumps, read_jsonl, sha256_file, atomic_write_text, write_jsonl
from .errors import ConfigError, PipelineError
from .modelio import ModelClient, ModelEndpoint

logger = logging.getLogger("prefpipe.cli")


# ---------------------------------------------------------------------------
# Manifests and config plumbing
# ---------------------------------------------------------------------------


class ManifestWriter:
    """Collects inputs/outputs for one run and writes the manifest at the end."""

    def __init__(self, command: str, seed: int, config: dict):
        self.command = command
        self.seed = seed
        self.config = config
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.stats: dict = {}
        self.started_at = datetime.datetime.now(datetime.timezone.utc).isoformat()

    def add_input(self, path: str | None) -> None:
        if path:
            self.inputs[path] = sha256_file(path)

    def add_output(self, path: str | None) -> None:
        if path:
            self.outputs[path] = sha256_file(path)

    def write(self, anchor: str) -> str:
        manifest = {
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
            "config_digest": __import__("hashlib").sha256(json_dumps(self.config).encode()).hexdigest(),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "stats": self.stats,
            "started_at": self.started_at,
            "finished_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        }
        path = anchor if anchor.endswith("manifest.json") else anchor + ".manifest.json"
        atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def _load_mapping_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh) if path.endswith(".json") else yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def _resolve_config(defaults: dict, file_cfg: dict, cli_overrides: dict, sections: tuple[str, ...] = ()) -> dict:
    """Merge precedence: CLI flag > config file > default. ``sections`` names
    nested mapping keys (endpoint blocks) the file may carry."""
    unknown = set(file_cfg) - set(defaults) - set(sections)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update({k: v for k, v in file_cfg.items() if k in defaults})
    merged.update({k: v for k, v in cli_overrides.items() if v is not None})
    return merged


def _client(section: dict | None, what: str) -> ModelClient:
    if not section:
        raise ConfigError(f"config is missing the {what!r} endpoint section")
    return ModelClient(ModelEndpoint.from_dict(section))


def _endpoint_client(path: str) -> ModelClient:
    from .modelio import load_endpoint

    return ModelClient(load_endpoint(path))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simlab_gen(args: argparse.Namespace) -> int:
    stage_seed = derive_seed(args.seed, "simlab-gen")
    os.makedirs(args.out_dir, exist_ok=True)
    histories, truth = simlab.gen_population(
        seed=stage_seed,
        n_users=args.users,
        dim=args.dim,
        history_len=args.history_len,
        pair_margin=args.margin,
        context_rate=args.context_rate,
        user_prefix=args.user_prefix,
        dataset_tag=args.dataset_tag,
    )
    scores = simlab.score_corpus(histories, truth, kappa=args.kappa, weak_quality=args.weak_quality, seed=stage_seed)
    paths = {
        "histories": os.path.join(args.out_dir, "histories.jsonl"),
        "truth": os.path.join(args.out_dir, "truth.jsonl"),
        "scores": os.path.join(args.out_dir, "scores.jsonl"),
    }
    core.save_histories(paths["histories"], histories)
    simlab.save_truth(paths["truth"], truth)
    write_jsonl(paths["scores"], scores)
    config = {
        "users": args.users, "dim": args.dim, "history_len": args.history_len,
        "margin": args.margin, "context_rate": args.context_rate, "kappa": args.kappa,
        "weak_quality": args.weak_quality, "user_prefix": args.user_prefix, "dataset_tag": args.dataset_tag,
    }
    mw = ManifestWriter("simlab-gen", args.seed, config)
    for p in paths.values():
        mw.add_output(p)
    mw.stats = {"users": len(histories), "score_rows": len(scores)}
    mw.write(os.path.join(args.out_dir, "manifest.json"))
    print(f"wrote {len(histories)} users to {args.out_dir}")
    return 0


_SYNTH_DEFAULTS = {
    "num_segments": 3, "min_per_segment": 3, "tau_tract": 0.9, "min_subset": 3,
    "max_targets": 5, "min_kept": 3, "accuracy_threshold": 0.8, "debias": True,
}


def cmd_synthesize_sft(args: argparse.Namespace) -> int:
    file_cfg = _load_mapping_file(args.config)
    overrides = {
        "num_segments": args.num_segments, "tau_tract": args.tau_tract,
        "max_targets": args.max_targets, "accuracy_threshold": args.accuracy_threshold,
    }
    cfg = _resolve_config(_SYNTH_DEFAULTS, file_cfg, overrides, sections=("generator", "judge", "teacher"))
    generator = _client(file_cfg.get("generator"), "generator")
    judge = _client(file_cfg.get("judge"), "judge")
    teacher_cfg = file_cfg.get("teacher") or file_cfg.get("generator")
    teacher = _client(teacher_cfg, "teacher")
    synth_config = synthpipe.SynthConfig(seed=derive_seed(args.seed, "synthesize-sft"), **cfg)

    histories = core.load_histories(args.histories)
    scores = curriculum.load_scores(args.scores)
    tract: dict[str, dict[int, float]] = {}
    for s in scores:
        tract.setdefault(s.user_id, {})[s.index] = s.s_tract

    records, stats = synthpipe.run_corpus(histories, tract, generator, judge, teacher, synth_config, jobs=args.jobs)
    write_jsonl(args.out, (r.to_dict() for r in records))
    mw = ManifestWriter("synthesize-sft", args.seed, cfg)
    mw.add_input(args.histories)
    mw.add_input(args.scores)
    if args.config:
        mw.add_input(args.config)
    mw.add_output(args.out)
    mw.stats = stats
    mw.write(args.out)
    print(f"synthesized {stats['records']} records from {stats['users_with_records']}/{stats['users_in']} users")
    return 0


def cmd_prune(args: argparse.Namespace) -> int:
    if args.preset:
        base = curriculum.PRESET_CONFIGS[args.preset]
        defaults = {
            "alpha": base.alpha, "tract_low": base.tract_low, "tract_high": base.tract_high,
            "tail_fraction": base.tail_fraction, "tail_side": base.tail_side,
        }
    else:
        defaults = {"alpha": None, "tract_low": None, "tract_high": None, "tail_fraction": 1.0, "tail_side": "hardest"}
    file_cfg = _load_mapping_file(args.config)
    overrides = {
        "alpha": args.alpha, "tract_low": args.tract_low, "tract_high": args.tract_high,
        "tail_fraction": args.tail_fraction, "tail_side": args.tail_side,
    }
    cfg = _resolve_config(defaults, file_cfg, overrides)
    missing = [k for k in ("alpha", "tract_low", "tract_high") if cfg[k] is None]
    if missing:
        raise ConfigError(f"prune needs {missing} via --preset, --config, or flags")
    prune_config = curriculum.PruneConfig(**cfg)

    scores = curriculum.load_scores(args.scores)
    kept = curriculum.prune(scores, prune_config)
    instances = curriculum.build_rl_instances(kept)
    curriculum.save_instances(args.out, instances)
    if args.keep_scores:
        write_jsonl(
            args.keep_scores,
            (
                {"user_id": s.user_id, "index": s.index, "s_tract": s.s_tract, "s_learn": s.s_learn}
                for s in kept
            ),
        )
    mw = ManifestWriter("prune", args.seed, cfg)
    mw.add_input(args.scores)
    if args.config:
        mw.add_input(args.config)
    mw.add_output(args.out)
    mw.add_output(args.keep_scores)
    mw.stats = {"scores_in": len(scores), "kept": len(kept), "instances": len(instances)}
    mw.write(args.out)
    print(f"kept {len(kept)}/{len(scores)} points -> {len(instances)} instances")
    return 0


_ROLLOUT_DEFAULTS = {"gamma": None, "group_size": 4, "clip_eps": 0.2, "future_credit": "selected", "debias": True}


def cmd_rollout(args: argparse.Namespace) -> int:
    file_cfg = _load_mapping_file(args.config)
    overrides = {"gamma": args.gamma, "group_size": args.group_size, "clip_eps": args.clip_eps}
    cfg = _resolve_config(_ROLLOUT_DEFAULTS, file_cfg, overrides, sections=("policy", "judge"))
    if cfg["gamma"] is None:
        raise ConfigError("rollout needs an explicit gamma (--gamma or config file)")
    policy = _client(file_cfg.get("policy"), "policy")
    judge = _client(file_cfg.get("judge"), "judge")
    config = rlengine.RolloutConfig(seed=derive_seed(args.seed, "rollout"), **cfg)

    histories = {h.user_id: h for h in core.load_histories(args.histories)}
    instances = curriculum.load_instances(args.instances)
    trees, stats = rlengine.run_rollouts(policy, judge, instances, histories, config, jobs=args.jobs)
    records = rlengine.export_batch(trees)
    rlengine.save_batch(args.out, records)
    if args.trees:
        write_jsonl(args.trees, (t.to_dict() for t in trees))
    mw = ManifestWriter("rollout", args.seed, cfg)
    for p in (args.histories, args.instances, args.config):
        mw.add_input(p)
    mw.add_output(args.out)
    mw.add_output(args.trees)
    mw.stats = {**stats, "records": len(records)}
    mw.write(args.out)
    print(
        f"rolled out {stats['trees']}/{stats['instances_in']} instances "
        f"({len(records)} records, mean reward {stats['mean_immediate_reward']})"
    )
    return 0


def cmd_loss_check(args: argparse.Namespace) -> int:
    records = rlengine.load_batch(args.batch)
    if args.self_check:
        new_logprobs = [list(r.old_token_logprobs) for r in records]
    else:
        if not args.new_logprobs:
            raise ConfigError("loss-check needs --new-logprobs (or --self-check)")
        new_logprobs = [rec["logprobs"] for rec in read_jsonl(args.new_logprobs)]
    loss = rlengine.surrogate_loss(records, new_logprobs, clip_eps=args.clip_eps)
    print(json_dumps({"loss": loss, "records": len(records), "clip_eps": args.clip_eps}))
    return 0


def cmd_stream_infer(args: argparse.Namespace) -> int:
    generator = _endpoint_client(args.generator)
    histories = core.load_histories(args.histories)
    os.makedirs(args.state_dir, exist_ok=True)
    states = [streamer.infer_streaming(generator, h, args.chunks) for h in histories]
    states_path = os.path.join(args.state_dir, "states.jsonl")
    summaries_path = os.path.join(args.state_dir, "summaries.jsonl")
    streamer.save_states(states_path, states)
    core.save_summaries(summaries_path, {s.user_id: s.current for s in states})
    mw = ManifestWriter("stream-infer", args.seed, {"chunks": args.chunks})
    mw.add_input(args.histories)
    mw.add_input(args.generator)
    mw.add_output(states_path)
    mw.add_output(summaries_path)
    mw.stats = {"users": len(states)}
    mw.write(os.path.join(args.state_dir, "manifest.json"))
    print(f"streamed {len(states)} users in {args.chunks} chunk(s)")
    return 0


def cmd_build_transfer(args: argparse.Namespace) -> int:
    mw = ManifestWriter(f"build-transfer:{args.mode}", args.seed, {"mode": args.mode})
    if args.mode == "cross-domain":
        if not (args.histories_a and args.histories_b and args.embedder):
            raise ConfigError("cross-domain needs --histories-a, --histories-b, --embedder")
        client = _endpoint_client(args.embedder)
        corpus_a = core.load_histories(args.histories_a)
        corpus_b = core.load_histories(args.histories_b)
        trimmed_a, inst_a = evalharness.holdout_instances(corpus_a)
        trimmed_b, inst_b = evalharness.holdout_instances(corpus_b)
        targets = {
            i.user_id: core.InteractionTriple(index=0, chosen=i.item_a, rejected=i.item_b, context=i.context)
            for i in inst_a + inst_b
        }
        pairs = transferbench.match_users(client, trimmed_a, trimmed_b, args.top_k)
        instances, stats = transferbench.swap_targets(pairs, targets)
        write_jsonl(args.out, instances)
        if args.out_histories:
            core.save_histories(args.out_histories, trimmed_a + trimmed_b)
            mw.add_output(args.out_histories)
        mw.config.update({"top_k": args.top_k})
        mw.add_input(args.histories_a)
        mw.add_input(args.histories_b)
        mw.stats = stats
    elif args.mode == "multi-interest":
        if not (args.histories and args.donors):
            raise ConfigError("multi-interest needs --histories and --donors")
        primaries = core.load_histories(args.histories)
        donors = core.load_histories(args.donors)
        if not donors:
            raise ConfigError("donor corpus is empty")
        import random as _random

        rng = _random.Random(derive_seed(args.seed, "build-transfer", "pairing"))
        fused, provenance = [], []
        for primary in primaries:
            pool = [d for d in donors if d.user_id != primary.user_id] or donors
            donor = pool[rng.randrange(len(pool))]
            result = transferbench.inject_secondary(
                primary, donor, transferbench.NoiseConfig(intensity=args.intensity, seed=derive_seed(args.seed, "inject"))
            )
            fused.append(result.history)
            provenance.append(
                {
                    "user_id": result.history.user_id,
                    "donor_user": result.donor_user,
                    "injected_positions": list(result.injected_positions),
                    "source_indices": list(result.source_indices),
                }
            )
        core.save_histories(args.out, fused)
        if args.provenance:
            write_jsonl(args.provenance, provenance)
            mw.add_output(args.provenance)
        mw.config.update({"intensity": args.intensity})
        mw.add_input(args.histories)
        mw.add_input(args.donors)
        mw.stats = {"users": len(fused)}
    else:  # positive-only
        if not args.histories:
            raise ConfigError("positive-only needs --histories")
        histories = core.load_histories(args.histories)
        core.save_histories(args.out, [core.strip_negatives(h) for h in histories])
        mw.add_input(args.histories)
        mw.stats = {"users": len(histories)}
    mw.add_output(args.out)
    mw.write(args.out)
    print(f"build-transfer {args.mode}: wrote {args.out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    downstream = _endpoint_client(args.downstream)
    summaries = core.load_summaries(args.summaries)
    instances = evalharness.load_eval_instances(args.instances)
    report, outcomes = evalharness.evaluate_selection(
        downstream, summaries, instances,
        seed=derive_seed(args.seed, "evaluate"), strict=args.strict, label=args.label,
    )
    atomic_write_text(args.out, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if args.outcomes:
        write_jsonl(
            args.outcomes,
            (
                {
                    **o.instance.to_dict(),
                    "swapped": o.swapped, "reply": o.reply, "parsed": o.parsed,
                    "correct": o.correct, "failed": o.failed,
                }
                for o in outcomes
            ),
        )
    mw = ManifestWriter("evaluate", args.seed, {"strict": args.strict, "label": args.label})
    mw.add_input(args.summaries)
    mw.add_input(args.instances)
    mw.add_input(args.downstream)
    mw.add_output(args.out)
    mw.add_output(args.outcomes)
    mw.stats = report.to_dict()
    mw.write(args.out)
    print(evalharness.format_reports([report]))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prefpipe",
        description="Preference-reasoning pipeline engine: synthesis, pruning, rollouts, streaming, benchmarks.",
    )
    parser.add_argument("--seed", type=int, default=0, help="global seed; stages derive their own from it")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers for per-user stages")
    parser.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simlab-gen", help="generate a synthetic corpus with ground truth and score sidecar")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--users", type=int, default=50)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--history-len", type=int, default=12)
    p.add_argument("--margin", type=float, default=0.5)
    p.add_argument("--context-rate", type=float, default=0.5)
    p.add_argument("--kappa", type=float, default=8.0)
    p.add_argument("--weak-quality", type=float, default=0.5)
    p.add_argument("--user-prefix", default="u")
    p.add_argument("--dataset-tag", default="simlab")
    p.set_defaults(func=cmd_simlab_gen)

    p = sub.add_parser("synthesize-sft", help="generate-validate-merge SFT records")
    p.add_argument("--histories", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--config", required=True, help="YAML/JSON with generator/judge[/teacher] endpoints and knobs")
    p.add_argument("--out", required=True)
    p.add_argument("--num-segments", type=int)
    p.add_argument("--tau-tract", type=float)
    p.add_argument("--max-targets", type=int)
    p.add_argument("--accuracy-threshold", type=float)
    p.set_defaults(func=cmd_synthesize_sft)

    p = sub.add_parser("prune", help="curriculum-filter a score sidecar into RL instances")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(curriculum.PRESET_CONFIGS))
    p.add_argument("--alpha", type=float)
    p.add_argument("--tract-low", type=float)
    p.add_argument("--tract-high", type=float)
    p.add_argument("--tail-fraction", type=float)
    p.add_argument("--tail-side", choices=["hardest", "easiest"])
    p.add_argument("--keep-scores", help="optional path for the surviving scores")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("rollout", help="two-stage rollouts with rewards, advantages, and batch export")
    p.add_argument("--instances", required=True)
    p.add_argument("--histories", required=True)
    p.add_argument("--config", required=True, help="YAML/JSON with policy/judge endpoints and knobs")
    p.add_argument("--out", required=True)
    p.add_argument("--trees", help="optional path for full rollout tree dumps")
    p.add_argument("--gamma", type=float)
    p.add_argument("--group-size", type=int)
    p.add_argument("--clip-eps", type=float)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("loss-check", help="compute the clipped surrogate loss for an exported batch")
    p.add_argument("--batch", required=True)
    p.add_argument("--new-logprobs", help="JSONL rows {logprobs: [...]} aligned with the batch")
    p.add_argument("--self-check", action="store_true", help="use the batch's own logprobs (ratio 1)")
    p.add_argument("--clip-eps", type=float, default=0.2)
    p.set_defaults(func=cmd_loss_check)

    p = sub.add_parser("stream-infer", help="streaming inference over a corpus")
    p.add_argument("--histories", required=True)
    p.add_argument("--generator", required=True, help="endpoint config file")
    p.add_argument("--chunks", type=int, default=2)
    p.add_argument("--state-dir", required=True)
    p.set_defaults(func=cmd_stream_infer)

    p = sub.add_parser("build-transfer", help="construct transfer-benchmark corpora")
    p.add_argument("--mode", required=True, choices=["cross-domain", "multi-interest", "positive-only"])
    p.add_argument("--out", required=True)
    p.add_argument("--histories")
    p.add_argument("--histories-a")
    p.add_argument("--histories-b")
    p.add_argument("--embedder", help="endpoint config file (cross-domain)")
    p.add_argument("--top-k", type=int, default=1000)
    p.add_argument("--out-histories", help="optional combined trimmed corpus (cross-domain)")
    p.add_argument("--donors", help="donor corpus (multi-interest)")
    p.add_argument("--intensity", type=float, default=0.3)
    p.add_argument("--provenance", help="optional injection provenance output (multi-interest)")
    p.set_defaults(func=cmd_build_transfer)

    p = sub.add_parser("evaluate", help="selection-style evaluation of stored summaries")
    p.add_argument("--summaries", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--downstream", required=True, help="endpoint config file")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--outcomes", help="optional per-instance outcome JSONL")
    p.add_argument("--strict", action="store_true", help="accept only clean JSON selections")
    p.add_argument("--label", default="eval")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
