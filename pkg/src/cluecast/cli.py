"""Command-line entry point.

Subcommands: ingest, synth, stats, pretrain, train-stage2, train-joint,
eval, explain. Structured outputs are line-delimited JSON (see FORMATS.md);
every artifact is written atomically. Exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import fileio, synth, tkg
from . import training as tr
from .checkpoint import load_checkpoint, save_checkpoint
from .stage1 import Query

logger = logging.getLogger("cluecast")


def _add_common(sub: argparse.ArgumentParser, data: bool = True, out: bool = True) -> None:
    sub.add_argument("--config", type=Path, default=None, help="flat key=value config file")
    sub.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="override one config key (repeatable)")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--precision", choices=("float64", "float32"), default=None)
    sub.add_argument("--workers", type=int, default=None, help="parallel evaluation fan-out")
    if data:
        sub.add_argument("--data-dir", type=Path, required=True)
        sub.add_argument("--time-gap", type=int, default=1)
    if out:
        sub.add_argument("--out-dir", type=Path, required=True)


def _config_from_args(args) -> tr.TrainConfig:
    mapping: dict[str, str] = {}
    if args.config is not None:
        mapping.update(fileio.parse_kv_file(args.config))
    for item in args.overrides:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        mapping[key.strip()] = val.strip()
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    if args.precision is not None:
        mapping["precision"] = args.precision
    if args.workers is not None:
        mapping["workers"] = str(args.workers)
    return tr.TrainConfig.from_mapping(mapping)


def _load_bundle(args) -> tkg.DatasetBundle:
    d = args.data_dir
    stat = d / "stat.txt"
    bundle = tkg.load_dataset(
        d / "train.txt", d / "valid.txt", d / "test.txt",
        time_gap=getattr(args, "time_gap", 1),
        stat_path=stat if stat.exists() else None,
    )
    tags_path = d / "tags.jsonl"
    if tags_path.exists():
        tags, paired = {}, {}
        for rec in fileio.read_jsonl(tags_path):
            tags[rec["split"]] = np.array(rec["tags"], dtype=np.int64)
            paired[rec["split"]] = np.array(rec["paired"], dtype=bool)
        bundle.tags = tags
        bundle.paired = paired
    return bundle


def _write_split(path: Path, arr: np.ndarray) -> None:
    fileio.atomic_write_text(path, "".join(f"{s}\t{r}\t{o}\t{t}\n" for s, r, o, t in arr.tolist()))


def _subset_mask(bundle: tkg.DatasetBundle, split: str, subset: str) -> np.ndarray | None:
    if subset == "all":
        return None
    if bundle.tags is None or bundle.paired is None:
        raise ValueError(f"--subset {subset} needs a tags.jsonl next to the dataset")
    if subset == "rule-following":
        return bundle.tags[split] >= 0
    if subset == "lag-pairs":
        return bundle.paired[split]
    raise ValueError(f"unknown subset {subset!r}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    bundle = _load_bundle(args)
    summary = {
        "num_entities": bundle.num_entities,
        "num_relations": bundle.num_base_relations,
        "n_train": int(bundle.train.shape[0]),
        "n_valid": int(bundle.valid.shape[0]),
        "n_test": int(bundle.test.shape[0]),
        "time_gap": bundle.time_gap,
        "max_time": int(bundle.all_facts()[:, 3].max()),
    }
    fileio.write_jsonl(args.out_dir / "dataset_summary.jsonl", [summary])
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    rules = []
    if args.rules:
        for part in args.rules.split(","):
            head, prob = part.split(":")
            cause, rest = head.split(">")
            effect, lag = rest.split("@")
            rules.append((int(cause), int(effect), int(lag), float(prob)))
    cfg = synth.SynthConfig(
        num_entities=args.entities,
        num_relations=args.relations,
        num_timesteps=args.timesteps,
        rules=rules,
        noise_facts_per_step=args.noise,
        pairs_per_step=args.pairs_per_step,
        seed=args.seed if args.seed is not None else 0,
    )
    bundle = synth.generate_synthetic(cfg)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "valid", "test"):
        _write_split(out / f"{split}.txt", bundle.split(split))
    fileio.atomic_write_text(out / "stat.txt", f"{bundle.num_entities}\t{bundle.num_base_relations}\n")
    fileio.write_jsonl(
        out / "tags.jsonl",
        [
            {
                "split": split,
                "tags": bundle.tags[split].tolist(),
                "paired": bundle.paired[split].tolist(),
            }
            for split in ("train", "valid", "test")
        ],
    )
    fileio.write_jsonl(out / "synth_meta.jsonl", [bundle.meta["synth_config"]])
    print(f"wrote synthetic dataset to {out} "
          f"({bundle.train.shape[0]}/{bundle.valid.shape[0]}/{bundle.test.shape[0]} facts)")
    return 0


def cmd_stats(args) -> int:
    bundle = tkg.augment_inverse(_load_bundle(args))
    delta = args.two_hop_delta if args.two_hop_delta >= 0 else None
    stats = tkg.coverage_stats(bundle, two_hop_delta=delta)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    fileio.atomic_write_text(
        out / "coverage_report.txt",
        "".join(f"{k}\t{v:.6f}\n" for k, v in sorted(stats.items())),
    )
    fileio.write_jsonl(out / "coverage.jsonl", [stats])
    for k, v in sorted(stats.items()):
        print(f"{k}\t{v:.6f}")
    traces_dir = args.traces
    if traces_dir is not None:
        rollout_path = traces_dir / "rollout_traces.jsonl"
        reasoning_path = traces_dir / "reasoning_traces.jsonl"
        if not rollout_path.exists() or not reasoning_path.exists():
            raise FileNotFoundError(f"expected rollout/reasoning trace files under {traces_dir}")
        cat = ev.clue_category_stats(fileio.read_jsonl(reasoning_path))
        fileio.write_jsonl(out / "clue_categories.jsonl", [cat])
        fileio.atomic_write_text(
            out / "clue_categories.txt",
            "".join(f"{k}\t{v}\n" for k, v in sorted(cat.items())),
        )
        pairs = ev.clue_graph_export(fileio.read_jsonl(rollout_path))
        fileio.atomic_write_text(
            out / "clue_graph.tsv",
            "".join(f"{rc}\t{rq}\t{n}\n" for rc, rq, n in pairs),
        )
    return 0


def _train_command(args, phase: str) -> int:
    cfg = _config_from_args(args)
    bundle = _load_bundle(args)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"

    def log_cb(line: dict) -> None:
        fileio.append_jsonl(log_path, line)

    resume = load_checkpoint(args.resume) if args.resume else None
    start = load_checkpoint(args.checkpoint) if getattr(args, "checkpoint", None) else None
    epochs = args.epochs if args.epochs is not None else None
    if phase == "pretrain":
        ckpt = tr.pretrain_stage1(cfg, bundle, resume=resume, epochs=epochs, log_cb=log_cb)
    elif phase == "stage2":
        ckpt = tr.train_stage2_frozen(cfg, bundle, start=start, resume=resume, epochs=epochs, log_cb=log_cb)
    else:
        ckpt = tr.train_joint(
            cfg, bundle, start=start, resume=resume, epochs=epochs, log_cb=log_cb, force=args.force
        )
    path = out / f"{phase}.ckpt"
    save_checkpoint(path, ckpt)
    print(f"saved {phase} checkpoint to {path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    bundle = tkg.augment_inverse(_load_bundle(args))
    kg = tkg.build_kg(bundle)
    ckpt = load_checkpoint(args.checkpoint)
    params1, params2 = tr.params_from_checkpoint(cfg, ckpt)
    modes = tuple(args.modes.split(","))
    mask = _subset_mask(bundle, args.split, args.subset)
    result = ev.evaluate(
        kg, bundle, params1, params2, cfg,
        split=args.split, modes=modes, sample=args.sample, seed=cfg.seed,
        subset_mask=mask, collect_traces=args.traces, workers=cfg.workers,
    )
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    rows = result.metric_rows()
    fileio.write_jsonl(out / "metrics.jsonl", rows)
    for row in rows:
        if row["direction"] == "both":
            print(
                f"{row['mode']:<12} {row['setting']:<14} "
                f"MRR={row['mrr']:.4f} H@1={row['hits1']:.4f} H@10={row['hits10']:.4f} "
                f"n={row['n_queries']}"
            )
    if args.traces:
        fileio.write_jsonl(out / "rollout_traces.jsonl", result.rollout_traces)
        fileio.write_jsonl(out / "reasoning_traces.jsonl", result.reasoning_traces)
    return 0


def cmd_explain(args) -> int:
    cfg = _config_from_args(args)
    bundle = tkg.augment_inverse(_load_bundle(args))
    kg = tkg.build_kg(bundle)
    ckpt = load_checkpoint(args.checkpoint)
    params1, params2 = tr.params_from_checkpoint(cfg, ckpt)
    query = Query(args.subject, args.relation, args.time, args.answer)
    rng = ev.query_rng(cfg.seed, "test", 0)
    record = ev.explain(kg, query, params1, params2, cfg, rng, topk=args.topk)
    text = json.dumps(record, sort_keys=True, indent=2)
    if args.out is not None:
        fileio.atomic_write_text(args.out, text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cluecast", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a dataset and write a summary")
    _add_common(p)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("synth", help="generate a planted-rule synthetic dataset")
    _add_common(p, data=False)
    p.add_argument("--entities", type=int, default=200)
    p.add_argument("--relations", type=int, default=6)
    p.add_argument("--timesteps", type=int, default=60)
    p.add_argument("--noise", type=int, default=20)
    p.add_argument("--pairs-per-step", type=int, default=0)
    p.add_argument("--rules", type=str, default="",
                   help="comma list of cause>effect@lag:prob, e.g. 0>1@2:0.9")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("stats", help="history-coverage report (and clue stats from traces)")
    _add_common(p)
    p.add_argument("--two-hop-delta", type=int, default=-1,
                   help="constrain 2-hop coverage hops to within delta of each other (-1 = off)")
    p.add_argument("--traces", type=Path, default=None, help="directory with exported eval traces")
    p.set_defaults(fn=cmd_stats)

    for phase, name in (("pretrain", "pretrain"), ("stage2", "train-stage2"), ("joint", "train-joint")):
        p = sub.add_parser(name, help=f"run the {phase} training phase")
        _add_common(p)
        if phase != "pretrain":
            p.add_argument("--checkpoint", type=Path, default=None, help="starting checkpoint")
        p.add_argument("--resume", type=Path, default=None, help="mid-phase checkpoint to resume")
        p.add_argument("--epochs", type=int, default=None, help="override the configured epoch count")
        if phase == "joint":
            p.add_argument("--force", action="store_true", help="skip the phase-order check")
        p.set_defaults(fn=lambda a, ph=phase: _train_command(a, ph))

    p = sub.add_parser("eval", help="rank queries and report MRR / Hits@K")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--modes", type=str, default="full,stage1_only,stage2_only")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--subset", choices=("all", "rule-following", "lag-pairs"), default="all")
    p.add_argument("--traces", action="store_true", help="export rollout and reasoning traces")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("explain", help="narrative record for one query")
    _add_common(p, out=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--subject", type=int, required=True)
    p.add_argument("--relation", type=int, required=True)
    p.add_argument("--time", type=int, required=True)
    p.add_argument("--answer", type=int, default=None)
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(fn=cmd_explain)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # noqa: BLE001 -- single reporting point for the CLI
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
