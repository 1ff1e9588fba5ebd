"""Command-line entry point: ``mlap <command> ...``.

Exit codes: 0 success, 2 invalid configuration or input, 3 numeric failure
during training, 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import glob
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path


from . import analysis
from .analysis import fmt
from .autodiff import RngStream
from .config import PROFILES, ModelConfig
from .exceptions import ConfigError, LoadError, MLAPError, NumericError
from .graphs import (GENERATOR_VERSION, SplitSpec, SyntheticSpec, feature_vocab,
                     gen_synthetic_dataset, label_counts, load_jsonl, save_jsonl, split)
from .training import checkpoint_load, checkpoint_save, evaluate, train

logger = logging.getLogger("mlap")

EPOCH_HEADER = ["epoch", "train_loss", "val_metric"]
FINAL_HEADER = ["arch", "aggregator", "layers", "dim", "graphnorm", "seed", "metric",
                "train_metric", "val_metric", "test_metric"]


# ---------------------------------------------------------------------------
# experiment config files

_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)
                 if f.name not in ("node_vocab", "edge_vocab")}
_EXPERIMENT_KEYS = {"profile", "data", "split", "stratified", "split_seed", "out", "seeds"}


@dataclass
class ExperimentConfig:
    model: ModelConfig
    data: str | None = None
    split: SplitSpec = field(default_factory=SplitSpec)
    out: str | None = None
    seeds: list = field(default_factory=list)


def _parse_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _convert(key, text):
    if key == "aggregator":
        return None if text.lower() in ("", "none") else text
    if key == "graphnorm" or key == "stratified":
        return _parse_bool(text)
    if key in ("lr_base", "lr_decay_factor", "dropout"):
        return float(text)
    if key in ("layers", "dim", "num_classes", "lr_decay_every", "epochs", "batch_size",
               "seed", "split_seed"):
        return int(text)
    if key == "split":
        parts = [float(x) for x in text.split(",")]
        if len(parts) != 3:
            raise ValueError("split needs three comma-separated ratios")
        return tuple(parts)
    if key == "seeds":
        return parse_seeds(text)
    return text


def parse_seeds(text):
    """``"1..3"`` -> ``[1, 2, 3]``; ``"4,7"`` -> ``[4, 7]``."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ValueError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(x) for x in text.split(",") if x.strip()]


def parse_experiment_config(text, source="<config>"):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _MODEL_FIELDS and key not in _EXPERIMENT_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _convert(key, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
        lines[key] = lineno
    model_kw = {}
    if "profile" in values:
        if values["profile"] not in PROFILES:
            raise ConfigError(f"{source}:{lines['profile']}: unknown profile {values['profile']!r}")
        model_kw.update(PROFILES[values["profile"]])
    model_kw.update({k: v for k, v in values.items() if k in _MODEL_FIELDS})
    if "arch" in model_kw and model_kw["arch"] == "naive" and "aggregator" not in model_kw:
        model_kw["aggregator"] = None
    try:
        model = ModelConfig(**model_kw)
    except ConfigError as exc:
        blame = next((k for k in ("aggregator", "arch") if k in lines and k in str(exc)), None)
        if blame is None:
            blame = next((k for k in lines if k in str(exc)), None)
        where = f"{source}:{lines[blame]}" if blame else source
        raise ConfigError(f"{where}: {exc}") from None
    try:
        split_spec = SplitSpec(values.get("split", (8, 1, 1)), values.get("stratified", True),
                               values.get("split_seed", 0))
    except MLAPError as exc:
        raise ConfigError(f"{source}:{lines.get('split', 0)}: {exc}") from None
    return ExperimentConfig(model, values.get("data"), split_spec, values.get("out"),
                            values.get("seeds", []))


def load_experiment_config(path):
    return parse_experiment_config(Path(path).read_text(encoding="utf-8"), str(path))


# ---------------------------------------------------------------------------
# commands

def _write_csv(path, header, rows):
    out = open(path, "w", newline="", encoding="utf-8") if path else None
    fh = out or sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if out:
            out.close()


def cmd_gen_data(args):
    spec = SyntheticSpec(per_class_count=args.per_class, seed=args.seed)
    dataset = gen_synthetic_dataset(spec)
    save_jsonl(dataset, args.out)
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "per_class": args.per_class,
        "seed": args.seed,
        "num_graphs": len(dataset),
        "counts": {str(k): v for k, v in label_counts(dataset).items()},
    }
    Path(str(args.out) + ".manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def _split_extra(spec: SplitSpec):
    return {"split": {"ratios": list(spec.ratios), "stratified": spec.stratified, "seed": spec.seed}}


def _spec_from_extra(extra):
    s = extra.get("split")
    return SplitSpec(tuple(s["ratios"]), s["stratified"], s["seed"]) if s else SplitSpec()


def run_one_seed(config: ModelConfig, parts, split_spec, seed, out_dir):
    """Train one seed and write its CSVs and checkpoint under ``out_dir``."""
    train_set, val_set, test_set = parts
    config = config.replace(seed=seed)
    params, record = train(config, train_set, val_set or None, RngStream(seed))
    run_dir = Path(out_dir) / f"seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(run_dir / "epochs.csv", EPOCH_HEADER,
               [[e.epoch, fmt(e.train_loss), "" if e.val_metric is None else fmt(e.val_metric)]
                for e in record.epochs])
    metrics = [evaluate(params, config, s) if s else None for s in (train_set, val_set, test_set)]
    _write_csv(run_dir / "final.csv", FINAL_HEADER, [[
        config.arch, config.aggregator or "none", config.layers, config.dim,
        str(config.graphnorm).lower(), seed, config.metric,
        *["" if m is None else fmt(m) for m in metrics]]])
    checkpoint_save(params, config, run_dir / "model.ckpt", _split_extra(split_spec))
    logger.info("seed %d: %s", seed, ", ".join("" if m is None else f"{m:.4f}" for m in metrics))
    return metrics


def cmd_train(args):
    exp = load_experiment_config(args.config)
    data_path = args.data or exp.data
    if not data_path:
        raise ConfigError("no dataset: set 'data' in the config or pass --data")
    out_dir = args.out or exp.out
    if not out_dir:
        raise ConfigError("no output directory: set 'out' in the config or pass --out")
    if args.seeds:
        seeds = parse_seeds(args.seeds)
    elif args.seed is not None:
        seeds = [args.seed]
    else:
        seeds = exp.seeds or [exp.model.seed]
    dataset = load_jsonl(data_path)
    node_vocab, edge_vocab = feature_vocab(dataset)
    config = exp.model.replace(node_vocab=node_vocab, edge_vocab=edge_vocab)
    parts = split(dataset, exp.split)
    workers = min(len(seeds), max(1, int(os.environ.get("MLAP_NUM_WORKERS", "1"))))
    if workers == 1:
        for s in seeds:
            run_one_seed(config, parts, exp.split, s, out_dir)
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_one_seed, config, parts, exp.split, s, out_dir) for s in seeds]
            for f in futures:
                f.result()
    return 0


def cmd_eval(args):
    params, config, _ = checkpoint_load(args.checkpoint)
    value = evaluate(params, config, load_jsonl(args.data), args.metric)
    _write_csv(args.out, ["metric", "value"], [[args.metric or config.metric, fmt(value)]])
    return 0


def _load_model_and_splits(args):
    params, config, extra = checkpoint_load(args.checkpoint)
    dataset = load_jsonl(args.data)
    return params, config, split(dataset, _spec_from_extra(extra)), dataset


def cmd_probe(args):
    params, config, (train_set, _, test_set), _ = _load_model_and_splits(args)
    train_dump = analysis.extract_embeddings(params, config, train_set, "train")
    test_dump = analysis.extract_embeddings(params, config, test_set, "test")
    results = analysis.probe_suite(train_dump, test_dump, args.task, config.head, args.seed)
    tags = list(results)
    _write_csv(args.out, ["split"] + [str(t) for t in tags],
               [["train"] + [fmt(results[t][0]) for t in tags],
                ["test"] + [fmt(results[t][1]) for t in tags]])
    return 0


def read_final_rows(pattern):
    rows = []
    for path in sorted(glob.glob(pattern, recursive=True)):
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                try:
                    rows.append({
                        "arch": rec["arch"], "aggregator": rec["aggregator"],
                        "layers": int(rec["layers"]), "graphnorm": rec["graphnorm"],
                        "seed": int(rec["seed"]), "metric": rec["metric"],
                        "val_metric": float(rec["val_metric"]), "test_metric": float(rec["test_metric"]),
                    })
                except (KeyError, ValueError) as exc:
                    raise LoadError(f"{path}: bad run row ({exc})") from None
    return rows


def cmd_compare(args):
    rows = read_final_rows(args.runs_glob)
    if not rows:
        raise LoadError(f"no run files match {args.runs_glob!r}")
    metrics = {r["metric"] for r in rows}
    if len(metrics) != 1:
        raise ConfigError(f"runs mix metrics {sorted(metrics)}")
    keys = tuple(k.strip() for k in args.groups.split(",") if k.strip())
    unknown = set(keys) - set(analysis.GROUP_KEYS)
    if unknown or "arch" not in keys:
        raise ConfigError(f"--groups must include 'arch' and only use {analysis.GROUP_KEYS}")
    results = analysis.compare_families(rows, metrics.pop(), keys)
    if args.out:
        analysis.write_stats_csv(results, args.out)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(analysis.STATS_HEADER)
        for name, r, p_adj in results:
            w.writerow([name, fmt(r.U), fmt(r.z), fmt(r.p), fmt(p_adj), fmt(r.r), r.n1, r.n2])
    return 0


def cmd_export(args):
    params, config, extra = checkpoint_load(args.checkpoint)
    if args.what == "weights":
        weights, applicable = analysis.export_mlap_weights(params, config)
        if not applicable:
            logger.warning("%s has no aggregation weights; writing ones", config.name)
        analysis.write_weights_csv(weights, args.out)
        return 0
    if not args.data:
        raise ConfigError("--data is required for --what embeddings")
    dataset = load_jsonl(args.data)
    if args.split != "all":
        parts = dict(zip(("train", "val", "test"), split(dataset, _spec_from_extra(extra))))
        dataset = parts[args.split]
    analysis.export_embeddings(analysis.extract_embeddings(params, config, dataset, args.split), args.out)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="mlap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic dataset as JSON lines")
    g.add_argument("--per-class", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one or more seeds from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data")
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds", help="e.g. 1..5 or 1,3,7")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metric", choices=("error_rate", "accuracy", "roc_auc"))
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", help="layer-wise probe classifiers")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--task", choices=tuple(analysis.TASKS), default="full")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_probe)

    c = sub.add_parser("compare", help="select best configs and run U-tests")
    c.add_argument("--runs-glob", required=True)
    c.add_argument("--groups", default=",".join(analysis.GROUP_KEYS))
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    x = sub.add_parser("export", help="export embeddings or MLAP weights as CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data")
    x.add_argument("--what", choices=("embeddings", "weights"), required=True)
    x.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (LoadError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except MLAPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
