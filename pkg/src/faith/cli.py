"""Command line: gen, train, eval, gradcheck.

Config precedence is flag > --config file > built-in default.  Every
command validates its inputs before it writes anything.
"""

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from faith import __version__
from faith import tensor as T
from faith.checkpoint import FormatError, load_checkpoint, save_checkpoint
from faith.data import (DataError, SamplingError, dump_jsonl, gen_planted_motif, graph_to_record,
                        load_jsonl, load_tu)
from faith.gradcheck import gradcheck
from faith.trainer import TrainConfig, evaluate, init_model, train

log = logging.getLogger("faith")

TRAIN_LOG_COLUMNS = ["step", "total_loss", "class_loss", "sample_loss", "train_acc"]
# flags that map one-to-one onto TrainConfig fields
CONFIG_FLAGS = ["n", "k", "q", "p", "steps", "sampler", "hierarchy", "classifier", "seed"]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- output

def fmt_float(x):
    s = format(x, ".17g")
    # keep floats recognisable as floats after a round trip
    return s if any(c in s for c in ".enia") else s + ".0"


def dumps(obj):
    """JSON with every float written to 17 significant digits."""
    if isinstance(obj, dict):
        items = (f"{json.dumps(str(k))}: {dumps(v)}" for k, v in obj.items())
        return "{" + ", ".join(items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps(v) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return json.dumps(x) if not math.isfinite(x) else fmt_float(x)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    return json.dumps(obj)


def write_json(path, obj):
    Path(path).write_text(dumps(obj) + "\n", encoding="utf-8")


def now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def fingerprint(dataset):
    h = hashlib.sha256()
    for g in dataset.graphs:
        h.update(json.dumps(graph_to_record(g), separators=(",", ":")).encode())
        h.update(b"\n")
    return h.hexdigest()


def manifest(config, dataset, seed, started, results):
    return {
        "version": __version__,
        "seed": seed,
        "config": config.to_dict(),
        "dataset_sha256": fingerprint(dataset) if dataset is not None else None,
        "started": started,
        "finished": now(),
        "results": results,
    }


# ----------------------------------------------------------- validation

def resolve_config(args, base=None):
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    values = dict(base or {})
    if getattr(args, "config", None):
        try:
            from_file = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
        values.update(from_file)
    for name in CONFIG_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def load_dataset(path, config):
    p = Path(path)
    try:
        if p.is_dir():
            ds = load_tu(p, p.name, config.base_classes, config.novel_classes)
        else:
            ds = load_jsonl(p, config.base_classes, config.novel_classes)
    except FileNotFoundError as exc:
        raise UsageError(f"dataset not found: {exc.filename or path}") from None
    except DataError as exc:
        raise UsageError(f"bad dataset: {exc}") from None
    return ds


def check_split(ds, config, need_novel):
    base = ds.eligible_classes("base", config.k, config.q, config.n)
    if len(base) < config.n:
        raise UsageError(f"{len(base)} usable base classes, N={config.n} needs {config.n}")
    if need_novel:
        novel = ds.eligible_classes("novel", config.k, config.q, config.n)
        if len(novel) < config.n:
            raise UsageError(f"{len(novel)} usable novel classes, N={config.n} needs {config.n}")


# -------------------------------------------------------------- commands

def cmd_gen(args):
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    if args.per_class < 1:
        raise UsageError("--per-class must be positive")
    seed = 0 if args.seed is None else args.seed
    ds = gen_planted_motif(args.classes, args.per_class, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.jsonl"
    dump_jsonl(ds.graphs, path)
    for c in range(ds.num_classes):
        print(f"class {c}: {len(ds.class_index[c])} graphs")
    print(f"wrote {path}")
    return 0


def cmd_train(args):
    if args.ckpt_every is not None and args.ckpt_every < 0:
        raise UsageError("--ckpt-every must be non-negative")
    config = resolve_config(args)
    ds = load_dataset(args.dataset, config)
    check_split(ds, config, need_novel=False)

    started = now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = init_model(config, ds.num_features, len(ds.base_classes))
    state.meta = {"dataset": str(Path(args.dataset).resolve()), "dataset_sha256": fingerprint(ds)}

    with open(out / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(TRAIN_LOG_COLUMNS)

        def on_step(rep):
            writer.writerow([rep["step"]] + [fmt_float(rep[c]) for c in TRAIN_LOG_COLUMNS[1:]])
            if args.ckpt_every and rep["step"] % args.ckpt_every == 0:
                fh.flush()
                save_checkpoint(state, out / f"checkpoint_{rep['step']:06d}.fth")

        reports = train(state, ds, callback=on_step)
    save_checkpoint(state, out / "checkpoint.fth")

    tail = reports[-100:]
    results = {
        "steps": len(reports),
        "final_mean_total_loss": float(np.mean([r["total_loss"] for r in tail])) if tail else None,
        "final_mean_train_acc": float(np.mean([r["train_acc"] for r in tail])) if tail else None,
    }
    write_json(out / "manifest.json", manifest(config, ds, config.seed, started, results))
    print(dumps(results))
    return 0


def cmd_eval(args):
    if args.episodes is not None and args.episodes < 1:
        raise UsageError("--episodes must be positive")
    try:
        state = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from None
    except FormatError as exc:
        raise UsageError(f"bad checkpoint {args.checkpoint}: {exc}") from None
    config = state.config
    dataset_path = args.dataset or state.meta.get("dataset")
    if not dataset_path:
        raise UsageError("no --dataset given and the checkpoint does not name one")
    ds = load_dataset(dataset_path, config)
    check_split(ds, config, need_novel=True)
    seed = config.seed if args.seed is None else args.seed
    if args.adjacency_dir:
        Path(args.adjacency_dir).mkdir(parents=True, exist_ok=True)

    started = now()
    res = evaluate(state, ds, episodes=args.episodes, seed=seed, adjacency_dir=args.adjacency_dir)
    summary = {"mean_accuracy": res["mean_accuracy"], "std_accuracy": res["std_accuracy"]}
    doc = {
        "mean_accuracy": res["mean_accuracy"],
        "std_accuracy": res["std_accuracy"],
        "episodes": res["episodes"],
        "config": config.to_dict(),
        "manifest": manifest(config, ds, seed, started, summary),
    }
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_json(Path(args.out) / "results.json", doc)
    print(dumps(doc))
    return 0


def cmd_gradcheck(args):
    seed = 0 if args.seed is None else args.seed
    t0 = time.perf_counter()
    report = gradcheck(seed=seed, coords=args.coords)
    for line in report.lines():
        print(line)
    print(f"elapsed {time.perf_counter() - t0:.1f}s")
    return 0 if report.passed else 1


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="faith", description="Few-shot graph classification.")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p):
        p.add_argument("--config", help="flat JSON object of TrainConfig fields")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen", help="write a planted-motif dataset as JSONL")
    shared(p)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--per-class", type=int, default=60)
    p.set_defaults(func=cmd_gen, out_required=True)

    p = sub.add_parser("train", help="episodic training")
    shared(p)
    p.add_argument("--dataset", required=True, help="JSONL file or TU directory")
    for name in ("n", "k", "q", "p", "steps"):
        p.add_argument(f"--{name}", type=int)
    p.add_argument("--sampler", choices=["loss", "random"])
    p.add_argument("--hierarchy", choices=["on", "off"])
    p.add_argument("--classifier", choices=["task", "euclidean"])
    p.add_argument("--ckpt-every", type=int, help="also checkpoint every this many steps")
    p.set_defaults(func=cmd_train, out_required=True)

    p = sub.add_parser("eval", help="accuracy over novel-class target tasks")
    shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--dataset", help="defaults to the dataset recorded in the checkpoint")
    p.add_argument("--adjacency-dir", help="dump the first episode's adjacencies as CSV here")
    p.set_defaults(func=cmd_eval, out_required=False)

    p = sub.add_parser("gradcheck", help="finite-difference check on a miniature episode")
    shared(p)
    p.add_argument("--coords", type=int, default=256)
    p.set_defaults(func=cmd_gradcheck, out_required=False)
    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("FAITH_LOG", "error").upper(),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        if args.out_required and not args.out:
            raise UsageError("--out is required")
        return args.func(args)
    except UsageError as exc:
        print(f"faith {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (SamplingError, T.ContractError) as exc:
        print(f"faith {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
