"""``evimerge`` command line: individual pipeline stages plus an end-to-end run.

Stage commands read their inputs from ``--from`` (defaults to ``--out``) and
only ever create new files under ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .adjacency import build_adjacency, compute_ads, partition_batch, write_ads_csv
from .bench import harness as H
from .bench.tasks import load_tasks, save_tasks, unified_label_count
from .config import ConfigError, config_hash, load_scenario
from .evidential import EvidentialHead, TrainingDiverged
from .network import pooled_features
from .params import (
    FormatError,
    LayoutError,
    MergeWeights,
    TaskVector,
    load_archive,
    merge_parameters,
    save_archive,
)
from .router import RouterNet, train_bd_merging

log = logging.getLogger("evimerge")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

COMMANDS = {
    "generate": "materialize the synthetic tasks of a scenario",
    "finetune": "pretrain the shared base and fine-tune one model per task",
    "train-head": "step 1: fit the joint evidential head on auxiliary data",
    "compute-ads": "step 2: adjacency sets and discrepancy scores as CSV",
    "train-router": "step 3: train the debiased router on the BD objective",
    "merge": "merge task vectors with fixed weights into one archive",
    "evaluate": "accuracy of a model or routed merge on clean and corrupted data",
    "ablate": "run ablation variants and write reports",
    "pipeline": "every step, baselines and reports for all seeds",
    "report": "summarize the accuracy rows of an earlier run directory",
    "archive-inspect": "print the entries and metadata of an archive",
}

DESIGN_DEFAULTS = {
    "pooled_features": "last hidden-layer activations of the base backbone",
    "contrastive_vectors": "unit-normalized merged-model logits",
    "ratio_clamp": "[1e-6, 1 - 1e-6]",
    "anchor_without_negatives": "contributes exactly 0",
    "epsilon": "per-batch median of ADS unless router.epsilon = 'fixed'",
    "radius": "per-batch distance percentile giving router.target_neighbors neighbors on average",
    "optimizer": "plain gradient descent",
    "head_init": "pretrained output layer",
    "corrupted_condition": "full test set with the corrupted fraction; corrupted-only also reported",
}


class UsageError(Exception):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, err: BaseException):
        super().__init__(f"stage {stage} failed: {err}")
        self.stage = stage
        self.err = err


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--scenario", help="TOML or JSON scenario file")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="run a single seed (default: scenario seeds)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a scenario key, e.g. router.eta=0.2")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evimerge", description="Evidence-guided, discrepancy-aware model merging.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    p = {name: sub.add_parser(name, help=text, description=text) for name, text in COMMANDS.items()}
    for name in ("generate", "finetune", "train-head", "compute-ads", "train-router", "merge", "ablate",
                 "pipeline"):
        _common(p[name])
    _common(p["evaluate"], out_required=False)
    for name in ("finetune", "train-head", "compute-ads", "train-router", "merge", "evaluate"):
        p[name].add_argument("--from", dest="src", help="directory holding earlier stage outputs (default: --out)")
    p["merge"].add_argument("--weights", help="comma-separated task weights (default: uniform)")
    p["evaluate"].add_argument("--model", help="archive to evaluate (default: the routed merge in --from)")
    p["evaluate"].add_argument("--condition", choices=["clean", "corrupted", "both"], default="both")
    p["ablate"].add_argument("--variants", default=",".join(H.ABLATIONS),
                             help=f"comma-separated subset of {','.join(H.ABLATIONS)}")
    p["report"].add_argument("run_dir", help="directory written by pipeline, ablate or evaluate")
    p["report"].add_argument("--json", action="store_true", help="machine-readable output")
    p["archive-inspect"].add_argument("path")
    p["archive-inspect"].add_argument("--json", action="store_true", help="machine-readable output")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> dict:
    cfg = load_scenario(args.scenario, args.overrides)
    if args.seed is not None:
        cfg["experiment"]["seeds"] = [args.seed]
    return cfg


def _seed(cfg: dict) -> int:
    return int(cfg["experiment"]["seeds"][0])


def _src(args) -> Path:
    return Path(args.src or args.out)


def _require(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"required input {str(path)!r} does not exist")
    return path


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stage(name: str, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (ConfigError, FileNotFoundError, FormatError, LayoutError, UsageError):
        raise
    except Exception as err:  # noqa: BLE001 - reported with the stage name
        raise StageError(name, err) from err


def _load_tasks(src: Path):
    return load_tasks(_require(src / "tasks.npz"))


def _load_vectors(src: Path, ids) -> list[TaskVector]:
    return [load_archive(_require(src / f"task_vector_{k}.evmg"), TaskVector) for k in ids]


def _seen(cfg: dict) -> list[int]:
    unseen = set(cfg["experiment"]["unseen_tasks"])
    return [k for k in range(cfg["tasks"]["num_tasks"]) if k not in unseen]


def _log_defaults(cfg: dict) -> None:
    for key, value in DESIGN_DEFAULTS.items():
        log.info("default %s: %s", key, value)
    log.info("config hash %s", config_hash(cfg))


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> None:
    cfg = _config(args)
    tasks = _stage("generate", H.make_tasks, cfg, _seed(cfg))
    out = _out(args)
    save_tasks(out / "tasks.npz", tasks)
    print(f"wrote {len(tasks)} tasks ({unified_label_count(tasks)} labels) to {out / 'tasks.npz'}")


def cmd_finetune(args) -> None:
    cfg = _config(args)
    tasks = _load_tasks(_src(args))
    models = _stage("finetune", H.build_models, cfg, tasks, _seed(cfg), _seen(cfg))
    out = _out(args)
    save_archive(models.base, out / "base.evmg")
    for k, ft in models.finetuned.items():
        save_archive(ft, out / f"finetuned_{k}.evmg")
        save_archive(models.vectors[k], out / f"task_vector_{k}.evmg")
    print(f"wrote base and {len(models.finetuned)} fine-tuned archives to {out}")


def cmd_train_head(args) -> None:
    cfg = _config(args)
    src = _src(args)
    tasks = _load_tasks(src)
    base = load_archive(_require(src / "base.evmg"))
    seed = _seed(cfg)
    aux = H.auxiliary_inputs(cfg, tasks, _seen(cfg), seed)
    settings = H.head_settings_from(cfg, unified_label_count(tasks))
    head, trace = _stage("train-head", H.build_head, base, aux, settings, seed)
    out = _out(args)
    save_archive(head.to_archive(), out / "head.evmg")
    with (out / "head_trace.csv").open("w") as fh:
        fh.write("epoch,loss,l_ent,l_inv\n")
        for e, row in enumerate(zip(trace.loss, trace.l_ent, trace.l_inv)):
            fh.write(",".join([str(e)] + [repr(v) for v in row]) + "\n")
    print(f"wrote {out / 'head.evmg'}")


def cmd_compute_ads(args) -> None:
    cfg = _config(args)
    src = _src(args)
    tasks = _load_tasks(src)
    base = load_archive(_require(src / "base.evmg"))
    head = EvidentialHead.from_archive(load_archive(_require(src / "head.evmg")))
    seed = _seed(cfg)
    aux = H.auxiliary_inputs(cfg, tasks, _seen(cfg), seed)
    bd = H.router_config_from(cfg, seed)

    def run():
        feats = pooled_features(base, aux)
        opinions = head.opinions(feats)
        order = np.random.default_rng([seed, 2]).permutation(len(aux))
        batches = []
        for start in range(0, len(aux), bd.batch_size):
            idx = np.sort(order[start : start + bd.batch_size])
            adjacency = build_adjacency(feats[idx], bd.radius)
            records = compute_ads(opinions.subset(idx), adjacency, bd.factors)
            eps, _ = partition_batch(records, bd.epsilon)
            batches.append((records, eps, idx))
        return batches

    batches = _stage("compute-ads", run)
    out = _out(args)
    write_ads_csv(out / "ads.csv", batches)
    print(f"wrote {sum(len(r) for b in batches for r in b[0])} scores to {out / 'ads.csv'}")


def cmd_train_router(args) -> None:
    cfg = _config(args)
    src = _src(args)
    tasks = _load_tasks(src)
    seed = _seed(cfg)
    seen = _seen(cfg)
    base = load_archive(_require(src / "base.evmg"))
    vectors = _load_vectors(src, seen)
    head = EvidentialHead.from_archive(load_archive(_require(src / "head.evmg")))
    aux = H.auxiliary_inputs(cfg, tasks, seen, seed)
    router, trace = _stage("train-router", train_bd_merging, base, vectors, aux, head,
                           H.router_config_from(cfg, seed))
    out = _out(args)
    save_archive(router.to_archive(), out / "router.evmg")
    trace.write_csv(out / "router_trace.csv")
    print(f"wrote {out / 'router.evmg'}")


def cmd_merge(args) -> None:
    cfg = _config(args)
    src = _src(args)
    seen = _seen(cfg)
    base = load_archive(_require(src / "base.evmg"))
    vectors = _load_vectors(src, seen)
    if args.weights:
        try:
            w = np.array([float(v) for v in args.weights.split(",")])
        except ValueError:
            raise ConfigError("INVALID_ARGUMENT", f"--weights must be comma-separated numbers, got {args.weights!r}")
        if len(w) != len(vectors):
            raise ConfigError("INVALID_ARGUMENT", f"--weights has {len(w)} values for {len(vectors)} task vectors")
        weights = MergeWeights("task", w)
    else:
        weights = MergeWeights.uniform(len(vectors))
    merged = _stage("merge", merge_parameters, base, vectors, weights)
    out = _out(args)
    save_archive(merged, out / "merged.evmg")
    print(f"wrote {out / 'merged.evmg'}")


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    if args.out is None:
        raise ConfigError("INVALID_ARGUMENT", "--out is required")
    src = _src(args)
    tasks = _load_tasks(src)
    seed = _seed(cfg)
    seen = _seen(cfg)
    if args.model:
        predictor = H.archive_predictor(load_archive(_require(Path(args.model))))
        method = Path(args.model).stem
    else:
        base = load_archive(_require(src / "base.evmg"))
        router = RouterNet.from_archive(load_archive(_require(src / "router.evmg")))
        predictor = H.routed_predictor(base, _load_vectors(src, seen), router)
        method = "bd-merging"
    reports = []
    if args.condition in ("clean", "both"):
        clean = [(k, tasks[k].x["te"], tasks[k].y["te"]) for k in seen]
        reports.append(_stage("evaluate", H.evaluate_merged, predictor, clean, "clean", method, "-", seed))
    if args.condition in ("corrupted", "both"):
        for sev in cfg["experiment"]["severities"]:
            full, only = H.corrupted_sets(cfg, tasks, seen, sev, seed)
            reports.append(_stage("evaluate", H.evaluate_merged, predictor, full, "corrupted", method, sev, seed))
            if only:
                reports.append(_stage("evaluate", H.evaluate_merged, predictor, only, "corrupted-only", method,
                                      sev, seed))
    out = _out(args)
    result = H.SeedResult(seed, reports)
    H.write_reports(out, cfg, [result], {"command": "evaluate"})
    for r in reports:
        print(f"{r.method:<16} {r.condition:<15} {r.severity:<3} {r.average:.4f}")


def cmd_ablate(args) -> None:
    cfg = _config(args)
    variants = [v for v in args.variants.split(",") if v]
    for v in variants:
        H.variant_settings(v)
    cfg["experiment"]["ablations"] = variants
    cfg["experiment"]["methods"] = []
    _log_defaults(cfg)
    results = _stage("ablate", H.run_scenario, cfg)
    H.write_reports(_out(args), cfg, results, {"command": "ablate", "design_defaults": DESIGN_DEFAULTS})
    _print_summary(results)


def cmd_pipeline(args) -> None:
    cfg = _config(args)
    _log_defaults(cfg)
    results = _stage("pipeline", H.run_scenario, cfg)
    H.write_reports(_out(args), cfg, results, {"command": "pipeline", "design_defaults": DESIGN_DEFAULTS})
    _print_summary(results)


def _print_summary(results) -> None:
    for row in H.summarize(results):
        print(f"{row['method']:<22} {row['condition']:<15} {row['severity']:<3} "
              f"{row['mean']:.4f} +- {row['std']:.4f}")


def cmd_report(args) -> None:
    path = _require(Path(args.run_dir) / "accuracy_long.csv")
    groups: dict[tuple, list[float]] = {}
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                acc = float(row["accuracy"])
            except (KeyError, ValueError):
                raise ConfigError("INVALID_REPORT", f"{str(path)!r} has a malformed row: {row}") from None
            groups.setdefault((row["method"], row["condition"], row["severity"]), []).append(acc)
    rows = [{"method": m, "condition": c, "severity": s, "mean": float(np.mean(v)), "std": float(np.std(v)),
             "n": len(v)} for (m, c, s), v in groups.items()]
    if args.json:
        print(json.dumps(rows, indent=2, sort_keys=True))
        return
    for row in rows:
        print(f"{row['method']:<22} {row['condition']:<15} {row['severity']:<3} "
              f"{row['mean']:.4f} +- {row['std']:.4f}  (n={row['n']})")


def cmd_archive_inspect(args) -> None:
    path = _require(Path(args.path))
    archive = load_archive(path)
    if args.json:
        print(json.dumps({"format_version": archive.format_version, "metadata": archive.metadata,
                          "entries": archive.table()}, indent=2, sort_keys=True))
        return
    print(f"format version {archive.format_version}, {len(archive)} entries, {archive.layer_count} layers")
    for key, value in sorted(archive.metadata.items()):
        print(f"  {key} = {value}")
    for row in archive.table():
        shape = "x".join(str(d) for d in row["shape"]) or "scalar"
        print(f"  {row['name']:<24} layer {row['layer_index']:<3} {shape}")


HANDLERS = {
    "generate": cmd_generate,
    "finetune": cmd_finetune,
    "train-head": cmd_train_head,
    "compute-ads": cmd_compute_ads,
    "train-router": cmd_train_router,
    "merge": cmd_merge,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "pipeline": cmd_pipeline,
    "report": cmd_report,
    "archive-inspect": cmd_archive_inspect,
}


def _fail(code: str, detail: str, status: int) -> int:
    detail = " ".join(str(detail).split())
    print(f"error: {code}: {detail}", file=sys.stderr)
    return status


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        message, _, usage = str(err).partition("\n")
        print(usage.rstrip(), file=sys.stderr)
        return _fail("USAGE", message, EXIT_INVALID)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        HANDLERS[args.command](args)
    except ConfigError as err:
        return _fail(err.code, err, EXIT_INVALID)
    except FileNotFoundError as err:
        return _fail("FILE_NOT_FOUND", err, EXIT_INVALID)
    except FormatError as err:
        return _fail("INVALID_ARCHIVE", err, EXIT_INVALID)
    except LayoutError as err:
        return _fail("LAYOUT_MISMATCH", err, EXIT_INVALID)
    except StageError as err:
        code = "TRAINING_DIVERGED" if isinstance(err.err, TrainingDiverged) else "STAGE_FAILED"
        return _fail(code, err, EXIT_RUNTIME)
    except ValueError as err:
        return _fail("INVALID_ARGUMENT", err, EXIT_INVALID)
    except Exception as err:  # noqa: BLE001
        return _fail("RUNTIME_ERROR", f"{type(err).__name__}: {err}", EXIT_RUNTIME)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
