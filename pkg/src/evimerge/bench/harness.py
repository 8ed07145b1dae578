"""Fine-tuning, evaluation, baselines, ablations and whole-scenario runs."""

from __future__ import annotations

import csv
import json
import logging
import os
import platform
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy

from .. import __version__
from .. import tensor as T
from ..config import config_hash
from ..adjacency import ADSFactors, EpsilonPolicy, RadiusPolicy
from ..evidential import EvidentialHead, HeadConfig, HeadTrace, TrainingDiverged, train_head
from ..network import MLPSpec, forward, forward_numpy, init_archive
from ..params import (
    MergeWeights,
    ParameterArchive,
    TaskVector,
    canonicalize_against,
    compute_task_vector,
    merge_parameters,
)
from ..router import BDConfig, LossTrace, routed_logits, train_bd_merging, train_static_weights
from .corruption import CorruptionSpec, apply_corruption
from .tasks import TaskData, TaskGeometry, generate_tasks, stack_split, unified_label_count

log = logging.getLogger(__name__)

BASELINES = ("uniform-average", "task-arithmetic", "static-adaptive")
METHODS = ("pretrained", "individual") + BASELINES + ("bd-merging",)
ABLATIONS = ("full", "no-sharp", "no-div", "no-conf", "no-ads", "no-router", "no-Linv", "no-Ldis")


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named random sub-stream of one experiment seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    method: str
    condition: str
    severity: str
    per_task: dict[int, float]
    seed: int
    wall_clock: float = 0.0

    def __post_init__(self):
        for k, acc in self.per_task.items():
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"task {k}: accuracy {acc} outside [0, 1]")

    @property
    def average(self) -> float:
        return float(np.mean(list(self.per_task.values()))) if self.per_task else float("nan")


Predictor = Callable[[np.ndarray], np.ndarray]


def archive_predictor(archive: ParameterArchive) -> Predictor:
    return lambda x: forward_numpy(archive, x)[1]


def routed_predictor(base: ParameterArchive, vectors: Sequence[TaskVector], producer) -> Predictor:
    return lambda x: routed_logits(base, vectors, producer, x)


def evaluate_merged(predictor: Predictor | dict[int, Predictor], datasets: Sequence[tuple[int, np.ndarray, np.ndarray]],
                    condition: str, method: str = "", severity: str = "-", seed: int = 0) -> EvalReport:
    """Top-1 accuracy over the unified label space for each (task, x, y)."""
    start = time.perf_counter()
    per_task = {}
    for k, x, y in datasets:
        if len(y) == 0:
            raise ValueError(f"task {k}: empty evaluation set")
        pred = predictor[k] if isinstance(predictor, dict) else predictor
        per_task[k] = float(np.mean(pred(x).argmax(axis=1) == y))
    return EvalReport(method, condition, severity, per_task, seed, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# supervised training of backbones


def train_classifier(archive: ParameterArchive, x: np.ndarray, y: np.ndarray, epochs: int, lr: float,
                     batch_size: int, rng: np.random.Generator, labels: Sequence[int] | None = None) -> ParameterArchive:
    """Minibatch gradient descent on cross-entropy.

    The softmax runs over ``labels`` (a subset of the unified label space) when
    given, otherwise over every output.
    """
    if epochs <= 0:
        return archive
    spec = MLPSpec(tuple([archive["layer0.weight"].shape[0]] +
                         [archive[f"layer{l}.weight"].shape[1] for l in range(archive.layer_count)]))
    params = {e.name: T.Tensor(e.values, requires_grad=True) for e in archive}
    n = x.shape[0]
    cols = np.arange(spec.num_outputs) if labels is None else np.asarray(labels)
    pos = {int(c): i for i, c in enumerate(cols)}
    onehot = np.eye(len(cols))[[pos[int(v)] for v in y]]
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            with T.Tape() as tape:
                _, logits = forward(params, x[idx], spec)
                if labels is not None:
                    logits = T.getitem(logits, (slice(None), cols))
                loss = -(T.log_softmax(logits, axis=1) * onehot[idx]).sum() * (1.0 / len(idx))
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"cross-entropy is {loss.item()} at epoch {epoch}")
            T.backward(tape, loss)
            for name, p in params.items():
                p.data = p.data - lr * p.grad
                if not np.all(np.isfinite(p.data)):
                    raise TrainingDiverged(f"parameter {name} became non-finite at epoch {epoch}")
    return archive.with_values([params[e.name].data for e in archive])


def pretrain_base(tasks: Sequence[TaskData], hidden: Sequence[int], epochs: int, lr: float, batch_size: int,
                  seed: int) -> ParameterArchive:
    """Shared starting point: a short supervised run on the small pt split of every task."""
    x, y = stack_split(list(tasks), "pt")
    spec = MLPSpec((x.shape[1], *hidden, unified_label_count(tasks)))
    base = init_archive(spec, stream(seed, "init"), {"role": "pretrained"})
    trained = train_classifier(base, x, y, epochs, lr, batch_size, stream(seed, "pretrain"))
    return trained.copy(metadata={**base.metadata})


def finetune_task_model(base: ParameterArchive, task: TaskData, epochs: int, lr: float, batch_size: int = 32,
                        seed: int = 0, label_scope: str = "task") -> ParameterArchive:
    """Supervised fine-tuning on the task's ft split; layout matches ``base``.

    ``label_scope="task"`` normalizes the softmax over the task's own labels,
    ``"unified"`` over the whole label space.
    """
    if label_scope not in ("task", "unified"):
        raise ValueError(f"unknown label scope {label_scope!r}")
    if epochs <= 0:
        return base
    rng = stream(seed, f"finetune/{task.task_id}")
    labels = task.spec.labels if label_scope == "task" else None
    tuned = train_classifier(base, task.x["ft"], task.y["ft"], epochs, lr, batch_size, rng, labels)
    tuned = tuned.copy(metadata={"role": "finetuned", "task": str(task.task_id)})
    return canonicalize_against(base, tuned)


# ---------------------------------------------------------------------------
# baselines


@dataclass
class MergeInputs:
    base: ParameterArchive
    vectors: list[TaskVector]
    aux_x: np.ndarray
    router_config: BDConfig
    ta_scale: float = 0.3


def baseline_predictor(kind: str, inputs: MergeInputs, scale: float | None = None) -> Predictor:
    k = len(inputs.vectors)
    if kind == "uniform-average":
        merged = merge_parameters(inputs.base, inputs.vectors, MergeWeights.uniform(k))
        return archive_predictor(merged)
    if kind == "task-arithmetic":
        lam = inputs.ta_scale if scale is None else scale
        merged = merge_parameters(inputs.base, inputs.vectors, MergeWeights("task", np.full(k, lam)))
        return archive_predictor(merged)
    if kind == "static-adaptive":
        static, _ = train_static_weights(inputs.base, inputs.vectors, inputs.aux_x, inputs.router_config)
        merged = merge_parameters(inputs.base, inputs.vectors, static.merge_weights())
        return archive_predictor(merged)
    raise ValueError(f"unknown baseline {kind!r}")


def run_baseline(kind: str, inputs: MergeInputs, datasets, condition: str = "clean", severity: str = "-",
                 seed: int = 0, scale: float | None = None) -> EvalReport:
    start = time.perf_counter()
    predictor = baseline_predictor(kind, inputs, scale)
    report = evaluate_merged(predictor, datasets, condition, kind, severity, seed)
    report.wall_clock = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# routed merging and its ablations


@dataclass
class VariantSettings:
    factors: ADSFactors = field(default_factory=ADSFactors)
    eta: float | None = None
    gamma: float | None = None
    static: bool = False


def variant_settings(variant: str) -> VariantSettings:
    table = {
        "full": VariantSettings(),
        "no-sharp": VariantSettings(ADSFactors(sharp=False)),
        "no-div": VariantSettings(ADSFactors(div=False)),
        "no-conf": VariantSettings(ADSFactors(conf=False)),
        "no-ads": VariantSettings(ADSFactors(enabled=False)),
        "no-router": VariantSettings(static=True),
        "no-Linv": VariantSettings(gamma=0.0),
        "no-Ldis": VariantSettings(eta=0.0),
    }
    if variant not in table:
        raise ValueError(f"unknown ablation variant {variant!r} (expected one of {', '.join(ABLATIONS)})")
    return table[variant]


@dataclass
class HeadSettings:
    config: HeadConfig
    epochs: int
    lr: float
    batch_size: int = 64
    init: str = "classifier"


def build_head(base: ParameterArchive, aux_x: np.ndarray, settings: HeadSettings,
               seed: int) -> tuple[EvidentialHead, HeadTrace]:
    """Step 1: the joint evidential head on the frozen pretrained backbone."""
    if settings.init == "classifier":
        head = EvidentialHead.from_classifier(base)
    else:
        feat_dim = base[f"layer{base.layer_count - 1}.weight"].shape[0]
        head = EvidentialHead.random(feat_dim, settings.config.num_labels, stream(seed, "head-init"))
    return train_head(base, head, aux_x, settings.config, settings.epochs, settings.lr, settings.batch_size,
                      stream(seed, "head"))


@dataclass
class BDResult:
    predictor: Predictor
    router: object
    trace: LossTrace
    head_trace: HeadTrace | None = None


def run_bd_variant(variant: str, inputs: MergeInputs, head_settings: HeadSettings, seed: int,
                   head_cache: dict | None = None) -> BDResult:
    v = variant_settings(variant)
    if v.static:
        static, trace = train_static_weights(inputs.base, inputs.vectors, inputs.aux_x, inputs.router_config)
        merged = merge_parameters(inputs.base, inputs.vectors, static.merge_weights())
        return BDResult(archive_predictor(merged), static, trace)
    hs = head_settings if v.gamma is None else replace(head_settings, config=replace(head_settings.config, gamma=v.gamma))
    key = (hs.config.gamma, hs.config.lam, hs.epochs)
    if head_cache is not None and key in head_cache:
        head, head_trace = head_cache[key]
    else:
        head, head_trace = build_head(inputs.base, inputs.aux_x, hs, seed)
        if head_cache is not None:
            head_cache[key] = (head, head_trace)
    cfg = replace(inputs.router_config, factors=v.factors)
    if v.eta is not None:
        cfg = replace(cfg, eta=v.eta)
    router, trace = train_bd_merging(inputs.base, inputs.vectors, inputs.aux_x, head, cfg)
    return BDResult(routed_predictor(inputs.base, inputs.vectors, router), router, trace, head_trace)


def run_ablation(variant: str, inputs: MergeInputs, head_settings: HeadSettings, datasets, condition: str,
                 severity: str = "-", seed: int = 0) -> EvalReport:
    start = time.perf_counter()
    result = run_bd_variant(variant, inputs, head_settings, seed)
    report = evaluate_merged(result.predictor, datasets, condition, variant, severity, seed)
    report.wall_clock = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# scenario runs


def router_config_from(cfg: dict, seed: int) -> BDConfig:
    r = cfg["router"]
    radius = RadiusPolicy(r["radius"], r["radius_value"], r["target_neighbors"])
    eps = EpsilonPolicy(r["epsilon"], r["epsilon_value"])
    return BDConfig(eta=r["eta"], temperature=r["temperature"], epsilon=eps, radius=radius, mode=r["mode"],
                    epochs=r["epochs"], batch_size=r["batch_size"], lr=r["lr"], seed=seed,
                    router_hidden=r["hidden"])


def head_settings_from(cfg: dict, num_labels: int) -> HeadSettings:
    h = cfg["head"]
    hc = HeadConfig(num_labels, h["lam"], h["gamma"], h["iec_clip"], h["entropy_sign"])
    return HeadSettings(hc, h["epochs"], h["lr"], h["batch_size"], h["init"])


def make_tasks(cfg: dict, seed: int) -> list[TaskData]:
    t = cfg["tasks"]
    geometry = TaskGeometry(t["task_shift"], t["class_sep"], t["noise"])
    samples = {s: t[s] for s in ("pt", "ft", "aux", "te")}
    return generate_tasks(t["num_tasks"], t["classes_per_task"], t["feature_dim"], samples, seed, geometry)


@dataclass
class Models:
    base: ParameterArchive
    finetuned: dict[int, ParameterArchive]
    vectors: dict[int, TaskVector]


def build_models(cfg: dict, tasks: Sequence[TaskData], seed: int, merged_ids: Sequence[int]) -> Models:
    p, f = cfg["pretrain"], cfg["finetune"]
    base = pretrain_base(tasks, cfg["model"]["hidden"], p["epochs"], p["lr"], p["batch_size"], seed)
    finetuned, vectors = {}, {}
    for k in merged_ids:
        finetuned[k] = finetune_task_model(base, tasks[k], f["epochs"], f["lr"], f["batch_size"], seed,
                                           f["label_scope"])
        vectors[k] = compute_task_vector(base, finetuned[k])
    return Models(base, finetuned, vectors)


@dataclass
class SeedResult:
    seed: int
    reports: list[EvalReport]
    traces: dict[str, LossTrace] = field(default_factory=dict)
    head_traces: dict[str, HeadTrace] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


def corrupted_sets(cfg: dict, tasks: Sequence[TaskData], ids: Sequence[int], severity: str, seed: int):
    c = cfg["corruption"]
    spec = CorruptionSpec(severity, c["fraction"], tuple(c["kinds"]), seed, c["intensity"])
    full, only = [], []
    for k in ids:
        x, y = tasks[k].x["te"], tasks[k].y["te"]
        res = apply_corruption(x, spec, stream(seed, f"corruption/{severity}/{k}"))
        full.append((k, res.x, y))
        if res.mask.any():
            only.append((k, res.x[res.mask], y[res.mask]))
    return full, only


def auxiliary_inputs(cfg: dict, tasks: Sequence[TaskData], ids: Sequence[int], seed: int) -> np.ndarray:
    """Unlabeled merging data; optionally drawn from the shifted test-time distribution."""
    c = cfg["corruption"]
    parts = []
    for k in ids:
        x = tasks[k].x["aux"]
        if c["aux"]:
            spec = CorruptionSpec(c["severity"], c["fraction"], tuple(c["kinds"]), seed, c["intensity"])
            x = apply_corruption(x, spec, stream(seed, f"corruption/aux/{k}")).x
        parts.append(x)
    return np.concatenate(parts)


def run_seed(cfg: dict, seed: int) -> SeedResult:
    """Every configured method and ablation for one seed."""
    exp = cfg["experiment"]
    t0 = time.perf_counter()
    tasks = make_tasks(cfg, seed)
    num_labels = unified_label_count(tasks)
    unseen = sorted(exp["unseen_tasks"])
    seen = [k for k in range(len(tasks)) if k not in unseen]
    models = build_models(cfg, tasks, seed, seen)
    result = SeedResult(seed, [])
    result.timings["setup"] = time.perf_counter() - t0

    aux_x = auxiliary_inputs(cfg, tasks, seen, seed)
    inputs = MergeInputs(models.base, [models.vectors[k] for k in seen], aux_x, router_config_from(cfg, seed),
                         cfg["baselines"]["task_arithmetic_scale"])
    head_settings = head_settings_from(cfg, num_labels)
    clean = [(k, tasks[k].x["te"], tasks[k].y["te"]) for k in seen]
    held_out = [(k, tasks[k].x["te"], tasks[k].y["te"]) for k in unseen]
    corrupted = {sev: corrupted_sets(cfg, tasks, seen, sev, seed) for sev in exp["severities"]}

    def evaluate_all(name: str, predictor) -> None:
        result.reports.append(evaluate_merged(predictor, clean, "clean", name, "-", seed))
        for sev, (full, only) in corrupted.items():
            result.reports.append(evaluate_merged(predictor, full, "corrupted", name, sev, seed))
            if only:
                result.reports.append(evaluate_merged(predictor, only, "corrupted-only", name, sev, seed))
        if held_out:
            result.reports.append(evaluate_merged(predictor, held_out, "unseen", name, "-", seed))

    head_cache: dict = {}
    for method in exp["methods"]:
        start = time.perf_counter()
        if method == "pretrained":
            predictor = archive_predictor(models.base)
        elif method == "individual":
            predictor = {k: archive_predictor(models.finetuned[k]) for k in seen}
            if held_out:
                predictor.update({k: archive_predictor(models.base) for k in unseen})
        elif method in BASELINES:
            predictor = baseline_predictor(method, inputs)
        elif method == "bd-merging":
            res = run_bd_variant("full", inputs, head_settings, seed, head_cache)
            predictor = res.predictor
            result.traces[method] = res.trace
            result.head_traces[method] = res.head_trace
        else:
            raise ValueError(f"unknown method {method!r}")
        evaluate_all(method, predictor)
        result.timings[method] = time.perf_counter() - start

    for variant in exp["ablations"]:
        start = time.perf_counter()
        res = run_bd_variant(variant, inputs, head_settings, seed, head_cache)
        evaluate_all(f"ablation:{variant}", res.predictor)
        result.traces[f"ablation:{variant}"] = res.trace
        result.timings[f"ablation:{variant}"] = time.perf_counter() - start
    result.timings["total"] = time.perf_counter() - t0
    return result


def find(reports: Sequence[EvalReport], method: str, condition: str, severity: str | None = None) -> EvalReport:
    for r in reports:
        if r.method == method and r.condition == condition and (severity is None or r.severity == severity):
            return r
    raise KeyError((method, condition, severity))


# ---------------------------------------------------------------------------
# multi-seed runs and report files


def thread_count() -> int:
    raw = os.environ.get("EVIMERGE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"EVIMERGE_THREADS must be an integer, got {raw!r}") from None


def run_scenario(cfg: dict, seeds: Sequence[int] | None = None) -> list[SeedResult]:
    """Seeds are independent; EVIMERGE_THREADS > 1 runs them in worker processes."""
    seeds = list(cfg["experiment"]["seeds"] if seeds is None else seeds)
    workers = min(thread_count(), len(seeds))
    if workers <= 1:
        return [run_seed(cfg, s) for s in seeds]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(run_seed, [cfg] * len(seeds), seeds))


def report_rows(results: Sequence[SeedResult]) -> list[dict]:
    rows = []
    for res in results:
        for r in res.reports:
            row = {"seed": r.seed, "method": r.method, "condition": r.condition, "severity": r.severity}
            row.update({f"task{k}": repr(v) for k, v in sorted(r.per_task.items())})
            row["average"] = repr(r.average)
            rows.append(row)
    return rows


def summarize(results: Sequence[SeedResult]) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    for res in results:
        for r in res.reports:
            groups.setdefault((r.method, r.condition, r.severity), []).append(r.average)
    return [
        {"method": m, "condition": c, "severity": s, "mean": float(np.mean(v)), "std": float(np.std(v)),
         "n": len(v)}
        for (m, c, s), v in groups.items()
    ]


def write_reports(out_dir, cfg: dict, results: Sequence[SeedResult], extra_manifest: dict | None = None) -> dict:
    """Write every report file; wall-clock times go to timing.json only."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = report_rows(results)
    fields = ["seed", "method", "condition", "severity"]
    fields += sorted({k for r in rows for k in r if k.startswith("task")}, key=lambda s: int(s[4:]))
    fields.append("average")
    with (out / "report.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, restval="")
        w.writeheader()
        w.writerows(rows)
    with (out / "accuracy_long.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "condition", "severity", "accuracy", "seed"])
        for res in results:
            for r in res.reports:
                w.writerow([r.method, r.condition, r.severity, repr(r.average), r.seed])
    (out / "summary.json").write_text(json.dumps(summarize(results), indent=2, sort_keys=True) + "\n")
    traces = out / "traces"
    traces.mkdir(exist_ok=True)
    for res in results:
        for name, trace in res.traces.items():
            trace.write_csv(traces / f"{name.replace(':', '-')}_seed{res.seed}.csv")
    manifest = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seeds": [r.seed for r in results],
        "versions": {"evimerge": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "files": sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "timing.json"),
    }
    manifest.update(extra_manifest or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    timing = {str(r.seed): r.timings for r in results}
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    return manifest
