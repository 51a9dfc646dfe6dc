"""Experiment harness: method x label-budget grids, hyper-parameter sweeps,
supervised baselines, and output rendering.

Every run gets its own directory under <output_dir>/runs containing the
fully resolved config, the metrics history, and a confusion matrix. A grid
is resumable: cells whose result file already exists are loaded, not
retrained. Cells are independent given their seeds, so execution order
(and parallelism) cannot change results.
"""

from __future__ import annotations

import dataclasses
import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, generate_synthetic, load_fer_csv, load_image_directory, make_splits
from .methods import METHODS, AugmentPolicies, MethodConfig, default_config
from .model import EncoderConfig
from .trainer import TrainConfig, train

CONFIG_FORMAT = "ssllab-config-v1"
RESULTS_FORMAT = "ssllab-results-v1"

SWEEPABLE = {
    "lambda_u": "lambda_u",
    "ema_m": "ema_m",
    "temperature": "temperature",
    "p_cutoff": "p_cutoff",
    "vat_epsilon": "vat_epsilon",
}

_METHOD_FIELDS = {f.name for f in dataclasses.fields(MethodConfig)}


class BenchError(Exception):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"  # synthetic | fer-csv | image-dir
    path: str | None = None
    n_per_class: int = 300
    n_classes: int = 4
    image_size: int = 16
    noise: float = 0.12
    synthetic_seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.kind not in ("synthetic", "fer-csv", "image-dir"):
            raise BenchError(f"unknown dataset kind {self.kind!r}")
        if self.kind != "synthetic" and not self.path:
            raise BenchError(f"dataset kind {self.kind!r} needs a path")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple
    method: str = "fixmatch"
    n_labels: int = 10

    def __post_init__(self):
        if self.parameter not in SWEEPABLE:
            raise BenchError(f"cannot sweep {self.parameter!r}; choose from {sorted(SWEEPABLE)}")
        if self.method not in METHODS:
            raise BenchError(f"unknown method {self.method!r}")
        if not self.values:
            raise BenchError("sweep needs at least one value")
        object.__setattr__(self, "values", tuple(self.values))

    def to_dict(self):
        return {"parameter": self.parameter, "values": list(self.values),
                "method": self.method, "n_labels": self.n_labels}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ExperimentSpec:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    methods: tuple = ("supervised-only", "fixmatch")
    n_labels: tuple = (10, 25, 100, 250)
    seeds: tuple = (0, 1, 2)
    output_dir: str = "out"
    train: TrainConfig = field(default_factory=TrainConfig)
    method_overrides: dict = field(default_factory=dict)
    encoder_widths: tuple = (16, 32, 64)
    encoder_residual: bool = False
    policies: AugmentPolicies = field(default_factory=AugmentPolicies)
    sweep: SweepSpec | None = None
    ssl_method: str = "fixmatch"  # the semi-supervised column of compare-supervised

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.n_labels = tuple(int(n) for n in self.n_labels)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise BenchError("need at least one seed")
        for m in self.methods + (self.ssl_method,):
            if m not in METHODS:
                raise BenchError(f"unknown method {m!r}")
        for name in self.method_overrides:
            if name not in _METHOD_FIELDS:
                raise BenchError(f"unknown MethodConfig parameter {name!r}")

    def to_dict(self):
        return {
            "format": CONFIG_FORMAT,
            "experiment": {
                "dataset": self.dataset.to_dict(),
                "methods": list(self.methods),
                "n_labels": list(self.n_labels),
                "seeds": list(self.seeds),
                "output_dir": self.output_dir,
                "method_overrides": dict(self.method_overrides),
                "sweep": None if self.sweep is None else self.sweep.to_dict(),
                "ssl_method": self.ssl_method,
            },
            "train": self.train.to_dict(),
            "encoder": {"channel_widths": list(self.encoder_widths), "use_residual": self.encoder_residual},
            "augment": self.policies.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format", CONFIG_FORMAT) != CONFIG_FORMAT:
            raise BenchError(f"unsupported config format {d.get('format')!r}")
        exp = d.get("experiment", {})
        sweep = exp.get("sweep")
        return cls(
            dataset=DatasetSpec.from_dict(exp.get("dataset", {})),
            methods=tuple(exp.get("methods", ("supervised-only", "fixmatch"))),
            n_labels=tuple(exp.get("n_labels", (10,))),
            seeds=tuple(exp.get("seeds", (0, 1, 2))),
            output_dir=exp.get("output_dir", "out"),
            train=TrainConfig.from_dict(d["train"]) if "train" in d else TrainConfig(),
            method_overrides=dict(exp.get("method_overrides", {})),
            encoder_widths=tuple(d.get("encoder", {}).get("channel_widths", (16, 32, 64))),
            encoder_residual=d.get("encoder", {}).get("use_residual", False),
            policies=AugmentPolicies.from_dict(d["augment"]) if "augment" in d else AugmentPolicies(),
            sweep=None if sweep is None else SweepSpec.from_dict(sweep),
            ssl_method=exp.get("ssl_method", "fixmatch"),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RunRecord:
    method: str
    n_labels: int | None  # None = all training labels
    seed: int
    status: str  # ok | error
    accuracy: float | None
    run_dir: str
    config: dict
    error: str | None = None

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ResultsTable:
    records: list

    def aggregate(self):
        """{(method, n_labels): (mean, stdev, count)} over ok runs."""
        groups = {}
        for r in self.records:
            if r.status != "ok":
                continue
            groups.setdefault((r.method, r.n_labels), []).append(r.accuracy)
        return {
            key: (float(np.mean(v)), float(np.std(v)), len(v))
            for key, v in groups.items()
        }

    def to_dict(self):
        return {"format": RESULTS_FORMAT, "records": [r.to_dict() for r in self.records]}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != RESULTS_FORMAT:
            raise BenchError(f"unsupported results format {d.get('format')!r}")
        return cls([RunRecord.from_dict(r) for r in d["records"]])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def render_text(self) -> str:
        agg = self.aggregate()
        methods = sorted({r.method for r in self.records}, key=lambda m: METHODS.index(m) if m in METHODS else 99)
        budgets = sorted({r.n_labels for r in self.records}, key=lambda n: (n is None, n))
        col = max((len(m) for m in methods), default=6) + 2
        head = "budget:".rjust(col) + "".join(f"{('all' if n is None else f'n={n}'):>18}" for n in budgets)
        lines = [head]
        for m in methods:
            cells = []
            for n in budgets:
                if (m, n) in agg:
                    mean, std, cnt = agg[(m, n)]
                    cells.append(f"{mean:.4f}±{std:.4f} ({cnt})".rjust(18))
                else:
                    cells.append("-".rjust(18))
            lines.append(m.rjust(col) + "".join(cells))
        return "\n".join(lines)


def load_dataset(ds: DatasetSpec) -> Dataset:
    if ds.kind == "synthetic":
        return generate_synthetic(ds.n_per_class, ds.n_classes, ds.image_size, ds.synthetic_seed, noise=ds.noise)
    if ds.kind == "fer-csv":
        result = load_fer_csv(ds.path)
        if result.row_errors:
            preview = "; ".join(f"row {e.row}: {e.message}" for e in result.row_errors[:5])
            print(f"warning: {len(result.row_errors)} malformed rows skipped ({preview})")
        return result.dataset
    return load_image_directory(ds.path)


_dataset_cache: dict[str, Dataset] = {}


def _cached_dataset(ds: DatasetSpec) -> Dataset:
    key = json.dumps(ds.to_dict(), sort_keys=True)
    if key not in _dataset_cache:
        _dataset_cache[key] = load_dataset(ds)
    return _dataset_cache[key]


def _cell_dir(out_dir, method, n_labels, seed):
    tag = "all" if n_labels is None else str(n_labels)
    return os.path.join(out_dir, "runs", f"{method}__n{tag}__s{seed}")


def _run_cell(payload: dict) -> dict:
    """Execute one grid cell; self-contained and picklable for process pools."""
    spec = ExperimentSpec.from_dict(payload["spec"])
    method = payload["method"]
    n_labels = payload["n_labels"]
    seed = payload["seed"]
    overrides = dict(spec.method_overrides)
    overrides.update(payload.get("extra_overrides", {}))
    run_dir = payload["run_dir"]
    os.makedirs(run_dir, exist_ok=True)

    method_cfg = default_config(method, **overrides)
    train_cfg = replace(spec.train, seed=seed)
    record = {
        "method": method,
        "n_labels": n_labels,
        "seed": seed,
        "status": "ok",
        "accuracy": None,
        "run_dir": run_dir,
        "config": {
            "train": train_cfg.to_dict(),
            "method": method_cfg.to_dict(),
            "encoder": {"channel_widths": list(spec.encoder_widths), "use_residual": spec.encoder_residual},
            "dataset": spec.dataset.to_dict(),
            "augment": spec.policies.to_dict(),
        },
        "error": None,
    }
    try:
        dataset = _cached_dataset(spec.dataset)
        splits = make_splits(dataset, n_labels, spec.dataset.validation_fraction, seed=seed)
        encoder_cfg = EncoderConfig(
            input_channels=dataset.images.shape[1],
            input_size=dataset.images.shape[2],
            channel_widths=spec.encoder_widths,
            use_residual=spec.encoder_residual,
            num_classes=dataset.num_classes,
        )
        result = train(train_cfg, method_cfg, splits, encoder_cfg=encoder_cfg, policies=spec.policies)
        record["accuracy"] = result.accuracy
        result.history.save(os.path.join(run_dir, "history.tsv"))
        with open(os.path.join(run_dir, "confusion.txt"), "w") as fh:
            fh.write(result.confusion.render() + "\n")
        with open(os.path.join(run_dir, "confusion.json"), "w") as fh:
            json.dump(
                {"counts": result.confusion.counts.tolist(), "class_names": result.confusion.class_names},
                fh,
            )
    except Exception as exc:  # grid keeps going; the cell records its failure
        record["status"] = "error"
        record["error"] = f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"
    with open(os.path.join(run_dir, "result.json"), "w") as fh:
        json.dump(record, fh, indent=2)
        fh.write("\n")
    return record


def _execute_cells(payloads, parallel: int):
    done = []
    pending = []
    for p in payloads:
        result_path = os.path.join(p["run_dir"], "result.json")
        if os.path.exists(result_path):
            with open(result_path) as fh:
                rec = json.load(fh)
            if rec.get("status") == "ok":
                done.append(rec)
                continue
        pending.append(p)
    if parallel > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            done.extend(pool.map(_run_cell, pending))
    else:
        done.extend(_run_cell(p) for p in pending)
    return [RunRecord.from_dict(r) for r in done]


def run_grid(spec: ExperimentSpec, parallel: int = 1) -> ResultsTable:
    """Train every (method, n_labels, seed) cell; completed cells are skipped."""
    os.makedirs(spec.output_dir, exist_ok=True)
    spec.save(os.path.join(spec.output_dir, "config.json"))
    payloads = [
        {
            "spec": spec.to_dict(),
            "method": m,
            "n_labels": n,
            "seed": s,
            "run_dir": _cell_dir(spec.output_dir, m, n, s),
        }
        for m in spec.methods
        for n in spec.n_labels
        for s in spec.seeds
    ]
    table = ResultsTable(sorted(_execute_cells(payloads, parallel),
                                key=lambda r: (r.method, (r.n_labels is None, r.n_labels), r.seed)))
    emit_outputs(table, spec.output_dir)
    return table


def run_sensitivity(spec: ExperimentSpec, parallel: int = 1):
    """One run per (sweep value, seed) at fixed method and label budget.

    Returns sweep records sorted by parameter value: each carries the exact
    config used plus mean/stdev accuracy over the seeds.
    """
    if spec.sweep is None:
        raise BenchError("spec has no sweep section")
    sweep = spec.sweep
    os.makedirs(spec.output_dir, exist_ok=True)
    spec.save(os.path.join(spec.output_dir, "config.json"))
    payloads = []
    for value in sweep.values:
        for s in spec.seeds:
            run_dir = os.path.join(
                spec.output_dir, "runs", f"sweep-{sweep.parameter}__{sweep.method}__v{value}__s{s}"
            )
            payloads.append(
                {
                    "spec": spec.to_dict(),
                    "method": sweep.method,
                    "n_labels": sweep.n_labels,
                    "seed": s,
                    "run_dir": run_dir,
                    "extra_overrides": {SWEEPABLE[sweep.parameter]: value},
                }
            )
    records = _execute_cells(payloads, parallel)
    by_value = {}
    for rec in records:
        value = rec.config["method"][SWEEPABLE[sweep.parameter]]
        by_value.setdefault(value, []).append(rec)
    rows = []
    for value in sorted(by_value):
        accs = [r.accuracy for r in by_value[value] if r.status == "ok"]
        rows.append(
            {
                "value": value,
                "mean_accuracy": float(np.mean(accs)) if accs else None,
                "stdev": float(np.std(accs)) if accs else None,
                "runs": [r.to_dict() for r in by_value[value]],
            }
        )
    out = {
        "format": RESULTS_FORMAT,
        "sweep": sweep.to_dict(),
        "rows": rows,
    }
    with open(os.path.join(spec.output_dir, "sweep.json"), "w") as fh:
        json.dump(out, fh, indent=2)
        fh.write("\n")
    with open(os.path.join(spec.output_dir, "sweep.txt"), "w") as fh:
        fh.write(f"sweep of {sweep.parameter} for {sweep.method} @ {sweep.n_labels} labels/class\n")
        for row in rows:
            mean = "failed" if row["mean_accuracy"] is None else f"{row['mean_accuracy']:.4f}±{row['stdev']:.4f}"
            fh.write(f"  {sweep.parameter}={row['value']}: {mean}\n")
    return rows


def compare_supervised(spec: ExperimentSpec, n_labels: int | None = None, parallel: int = 1):
    """Table-II-shaped comparison: supervised on all labels, supervised on
    n labels/class, and the chosen SSL method on n labels/class."""
    n = n_labels if n_labels is not None else spec.n_labels[0]
    os.makedirs(spec.output_dir, exist_ok=True)
    spec.save(os.path.join(spec.output_dir, "config.json"))
    columns = [
        ("supervised-all", "supervised-only", None),
        ("supervised-partial", "supervised-only", n),
        ("semi-supervised", spec.ssl_method, n),
    ]
    payloads = []
    for tag, method, budget in columns:
        for s in spec.seeds:
            payloads.append(
                {
                    "spec": spec.to_dict(),
                    "method": method,
                    "n_labels": budget,
                    "seed": s,
                    "run_dir": os.path.join(spec.output_dir, "runs", f"compare-{tag}__s{s}"),
                }
            )
    records = _execute_cells(payloads, parallel)
    by_key = {}
    for rec in records:
        by_key.setdefault((rec.method, rec.n_labels), []).append(rec)
    out_columns = []
    for tag, method, budget in columns:
        recs = by_key.get((method, budget), [])
        accs = [r.accuracy for r in recs if r.status == "ok"]
        out_columns.append(
            {
                "column": tag,
                "method": method,
                "n_labels": budget,
                "mean_accuracy": float(np.mean(accs)) if accs else None,
                "stdev": float(np.std(accs)) if accs else None,
                "runs": [r.to_dict() for r in recs],
            }
        )
    comparison = {"format": RESULTS_FORMAT, "columns": out_columns}
    with open(os.path.join(spec.output_dir, "comparison.json"), "w") as fh:
        json.dump(comparison, fh, indent=2)
        fh.write("\n")
    with open(os.path.join(spec.output_dir, "comparison.txt"), "w") as fh:
        for col in out_columns:
            mean = "failed" if col["mean_accuracy"] is None else f"{col['mean_accuracy']:.4f}±{col['stdev']:.4f}"
            fh.write(f"{col['column']:>20} ({col['method']}, n={col['n_labels']}): {mean}\n")
    return comparison


def emit_outputs(table: ResultsTable, out_dir):
    """Machine-readable results plus the aligned human-readable table."""
    os.makedirs(out_dir, exist_ok=True)
    table.save(os.path.join(out_dir, "results.json"))
    with open(os.path.join(out_dir, "results.txt"), "w") as fh:
        fh.write(table.render_text() + "\n")


def parse_results(path) -> ResultsTable:
    return ResultsTable.load(path)


def report(out_dir) -> str:
    """Re-render whatever outputs exist under an experiment directory."""
    chunks = []
    results_path = os.path.join(out_dir, "results.json")
    if os.path.exists(results_path):
        chunks.append(parse_results(results_path).render_text())
    sweep_path = os.path.join(out_dir, "sweep.txt")
    if os.path.exists(sweep_path):
        with open(sweep_path) as fh:
            chunks.append(fh.read().rstrip())
    cmp_path = os.path.join(out_dir, "comparison.txt")
    if os.path.exists(cmp_path):
        with open(cmp_path) as fh:
            chunks.append(fh.read().rstrip())
    if not chunks:
        return f"no results found under {out_dir}"
    return "\n\n".join(chunks)
