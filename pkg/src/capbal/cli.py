"""Command-line entry point: ``capbal {gen-tasks,train,eval-metrics,verify}``.

Exit codes
----------
0  success
1  ``verify`` found a failing check
2  configuration / usage error (bad JSON, unknown key, invalid value)
3  data error (unreadable corpus or dataset, malformed scores file)
4  numerical failure during training (NaN/Inf gradient)
5  warning: curation produced an empty dataset (files are still written)

Configuration is a JSON document (see README); any field can be
overridden with ``BBIO_<FIELD>`` or ``BBIO_<SECTION>__<FIELD>``.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from capbal import __version__
from capbal.config import RunConfig, apply_env_overrides, dump_config, load_config
from capbal.envpolicy import build_environment
from capbal.errors import ConfigError, DataError, GenerationError, NumericalError, WeightError
from capbal.grpo import capability_scores, train
from capbal.metrics import PRESETS, IntegrationConfig, integration_score
from capbal.balance import balance_score
from capbal import taskgen

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_EMPTY_DATASET = 5

DATASET_FILE = "dataset.jsonl"
COMPOSITION_FILE = "composition.json"
RUNLOG_FILE = "run_log.jsonl"
CONFIG_ECHO_FILE = "config.json"
FINAL_STATE_FILE = "final_state.json"

log = logging.getLogger("capbal")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _resolve_config(args):
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = apply_env_overrides(RunConfig())
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def format_composition(rows):
    lines = [f"{'capability':<12} {'synthetic':>9} {'real':>5} {'total':>6} {'quality':>8}"]
    for r in rows:
        q = "-" if r["quality"] is None else f"{r['quality']:.3f}"
        lines.append(f"{r['capability']:<12} {r['synthetic']:>9} {r['real']:>5} {r['total']:>6} {q:>8}")
    return "\n".join(lines)


def cmd_gen_tasks(args):
    cfg = _resolve_config(args)
    if cfg.seed is None:
        raise ConfigError("seed is mandatory (config 'seed', --seed or BBIO_SEED)")
    cfg.quality.validate()
    env = build_environment(cfg.env.validate(), cfg.reward_model_spec())
    corpus = taskgen.read_corpus(args.corpus) if args.corpus else taskgen.synthesize_corpus(cfg.corpus)
    ds = taskgen.curate(corpus, taskgen.templates_for_environment(env), cfg.quality, cfg.seed)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, DATASET_FILE)
    taskgen.write_dataset(path, ds)
    with open(os.path.join(cfg.output_dir, COMPOSITION_FILE), "w", encoding="utf-8") as fh:
        json.dump(ds.composition(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(format_composition(ds.composition()))
    print(f"generated={ds.n_generated} skipped={ds.n_skipped} retained={len(ds.instances)} -> {path}")
    if not ds.instances:
        print("warning: every instance was filtered out by the quality gate", file=sys.stderr)
        return EXIT_EMPTY_DATASET
    return EXIT_OK


def _final_state(state, env):
    scores = capability_scores(state.params, env)
    return {
        "iteration": state.iteration,
        "theta": state.params.theta.tolist(),
        "n_features": state.params.n_features,
        "n_actions": state.params.n_actions,
        "weights": state.weights.to_dict(),
        "group_spec": state.group_spec.to_dict(),
        "penalty": state.l2_conflict_penalty,
        "seed": state.seed,
        "capability_scores": scores.to_dict(),
    }


def cmd_train(args):
    cfg = _resolve_config(args)
    cfg.validate()
    dataset_path = args.dataset or cfg.dataset_path
    env = build_environment(cfg.env, cfg.reward_model_spec())
    pool = None
    if dataset_path:
        ds = taskgen.read_dataset(dataset_path)
        if not ds.instances:
            raise DataError(f"{dataset_path}: dataset is empty")
        pool = taskgen.bind_dataset(ds.instances, env)
    os.makedirs(cfg.output_dir, exist_ok=True)
    dump_config(cfg, os.path.join(cfg.output_dir, CONFIG_ECHO_FILE))
    log_path = os.path.join(cfg.output_dir, RUNLOG_FILE)
    with open(log_path, "w", encoding="utf-8") as fh:

        def sink(record):
            fh.write(json.dumps(record, sort_keys=True, default=_json_default) + "\n")
            fh.flush()

        runlog = train(cfg, dataset=pool, sink=sink)
    with open(os.path.join(cfg.output_dir, FINAL_STATE_FILE), "w", encoding="utf-8") as fh:
        json.dump(_final_state(runlog.state, env), fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    last = runlog.records[-1]
    print(
        f"iterations={cfg.iterations} balance={last['balance']:.3f} "
        f"max_cos={last['max_pairwise_cosine']:.4f} log={log_path}"
    )
    return EXIT_OK


def parse_scores(path):
    """Rows of three numbers (comma or whitespace separated); '#' starts a comment."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                vals = tuple(float(p) for p in parts)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if not all(np.isfinite(v) and v >= 0 for v in vals):
                raise DataError(f"{path}:{lineno}: scores must be finite and nonnegative")
            rows.append((lineno, vals))
    return rows


def cmd_eval_metrics(args):
    if args.mu_min_domain is not None:
        icfg = IntegrationConfig(mu_target=args.mu_target, mu_min_domain=args.mu_min_domain)
    else:
        icfg = PRESETS[args.preset]
    rows = parse_scores(args.scores)
    print(f"{'domain':>8} {'reasoning':>9} {'instr':>8} {'balance':>8} {'I_s':>8}")
    for lineno, vals in rows:
        try:
            b = balance_score(vals)
        except DataError as exc:
            raise DataError(f"{args.scores}:{lineno}: {exc}") from exc
        print(f"{vals[0]:8.2f} {vals[1]:9.2f} {vals[2]:8.2f} {b:8.3f} {integration_score(vals, icfg):8.3f}")
    return EXIT_OK


def cmd_verify(args):
    from capbal.verify import format_table, run_all

    results = run_all()
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY_FAILED


def build_parser():
    p = argparse.ArgumentParser(prog="capbal", description=__doc__.split("\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                epilog=__doc__.split("\n", 2)[2])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-tasks", help="curate a synthetic task dataset")
    g.add_argument("--config", help="JSON run config")
    g.add_argument("--corpus", help="JSONL source corpus (default: synthesise from config.corpus)")
    g.add_argument("--out", help="output directory (overrides config output_dir)")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.set_defaults(func=cmd_gen_tasks)

    t = sub.add_parser("train", help="run SFT + GRPO training")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--dataset", help="curated dataset (overrides config dataset_path)")
    t.add_argument("--out", help="output directory (overrides config output_dir)")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-metrics", help="Balance and Integration Score for score rows")
    e.add_argument("scores", help="text file with three scores (domain reasoning instruction) per row")
    e.add_argument("--preset", choices=sorted(PRESETS), default="comparison",
                   help="reference weakest-domain mean (default: comparison)")
    e.add_argument("--mu-min-domain", type=float, help="explicit weakest-domain mean (overrides --preset)")
    e.add_argument("--mu-target", type=float, default=70.0, help="target mean (default 70)")
    e.set_defaults(func=cmd_eval_metrics)

    v = sub.add_parser("verify", help="run the oracle self-check suite")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, WeightError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GenerationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
