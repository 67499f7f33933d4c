"""Experiment plans: run extractors over seeds, store per-run JSON, aggregate.

A plan is a JSON document::

    {
      "schema_version": 1,
      "dataset": {"synthetic": {"d": 512, "attribute_sizes": [3, 3], ...}},
      "runs": [{"name": "cce", "method": "cce", "config": {"S": 16}},
               {"name": "pca", "method": "pca"}],
      "metrics": ["map", "comp", "cosine"],
      "seeds": [0, 1, 2],
      "output_dir": "results"
    }

``dataset`` may instead give ``{"embeddings": path, "format": "csv",
"labels": path, "gt_concepts": path}``. For synthetic datasets each seed
generates its own data. Aggregates are computed only from the stored run
files, so regenerating them is byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines
from .cce import CCEConfig, cce_extract
from .concepts import ConceptSet
from .embedding_store import center_standardize, load_embeddings, load_labels
from .errors import ConceptForgeError, InvalidSpec, MissingRuns
from .metrics import ALL_METRICS, SCHEMA_VERSION, evaluate
from .synthetic import SyntheticSpec, generate

log = logging.getLogger(__name__)

METHODS = ("cce",) + baselines.METHODS
THREADS_ENV = "CONCEPT_FORGE_THREADS"
RUNS_DIR = "runs"
AGGREGATE_CSV = "aggregate.csv"
SUMMARY_TXT = "summary.txt"
# (json key, column label)
SUMMARY_METRICS = (
    ("map", "map"),
    ("compositionality_score", "comp"),
    ("matched_cosine_mean", "cosine"),
    ("downstream_accuracy", "downstream"),
)
_CCE_KEYS = {f for f in CCEConfig.__dataclass_fields__ if f != "seed"}


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# extraction shared with the CLI


def extract_concepts(method: str, Z, seed=0, **params):
    """Run one extractor on centered embeddings.

    Returns ``(ConceptSet, extra)`` where ``extra`` holds method-specific
    JSON such as the CCE subspaces and objective trace.
    """
    if method == "cce":
        unknown = set(params) - _CCE_KEYS
        if unknown:
            raise InvalidSpec(f"unknown cce options {sorted(unknown)}")
        if isinstance(params.get("K"), list):
            params["K"] = tuple(params["K"])
        result = cce_extract(Z, CCEConfig(seed=seed, **params))
        extra = result.to_json()
        extra.pop("concepts")
        return result.concepts, extra
    if method not in baselines.METHODS:
        raise InvalidSpec(f"unknown method {method!r}; expected one of {METHODS}")
    unknown = set(params) - {"K", "lam", "iters"}
    if unknown:
        raise InvalidSpec(f"unknown {method} options {sorted(unknown)}")
    K = params.pop("K")
    return baselines.extract(method, Z, int(K), seed=seed, **params), {}


def gt_from_json(obj, stats=None) -> ConceptSet:
    """Ground-truth concepts from a ConceptSet JSON or a ``synth`` ground-truth file.

    Generator files store raw base means, which are mapped through ``stats``
    into the standardized coordinates of the data when given.
    """
    if "base_reps_raw" in obj:
        raw = np.concatenate([np.asarray(b, dtype=float) for b in obj["base_reps_raw"]])
        rows = stats.apply(raw) if stats is not None else np.concatenate([np.asarray(b) for b in obj["base_reps"]])
        sizes = obj["attribute_sizes"]
        return ConceptSet(rows, np.repeat(np.arange(len(sizes)), sizes), tuple(obj.get("names", ())))
    return ConceptSet.from_json(obj)


def align_gt(gt: ConceptSet, L) -> ConceptSet:
    """Reorder named ground-truth rows to the labeling's concept order.

    Label files number concepts in first-seen order, so a ground-truth file
    written in another order must be permuted before per-sample lookups.
    """
    want = list(L.concept_names())
    if len(gt) != len(want):
        raise InvalidSpec(f"ground truth has {len(gt)} concepts, labels define {len(want)}")
    if not gt.names or list(gt.names) == want:
        return gt
    index = {n: i for i, n in enumerate(gt.names)}
    missing = [n for n in want if n not in index]
    if missing:
        raise InvalidSpec(f"ground truth lacks concepts {missing}")
    order = [index[n] for n in want]
    attr = None if gt.attribute_of is None else gt.attribute_of[order]
    return ConceptSet(gt.vectors[order], attr, tuple(want), gt.normalized, gt.flags)


# ---------------------------------------------------------------------------
# plans


@dataclass
class RunSpec:
    name: str
    method: str
    config: dict = field(default_factory=dict)


@dataclass
class ExperimentPlan:
    dataset: dict
    runs: list
    seeds: list
    output_dir: str
    metrics: tuple = ALL_METRICS

    def __post_init__(self):
        self.runs = [r if isinstance(r, RunSpec) else RunSpec(r.get("name", r["method"]), r["method"], dict(r.get("config", {})))
                     for r in self.runs]
        self.seeds = [int(s) for s in self.seeds]
        self.metrics = tuple(self.metrics)

    def validate(self, base_dir=".") -> None:
        if not self.seeds:
            raise InvalidSpec("plan lists no seeds")
        if not self.runs:
            raise InvalidSpec("plan lists no runs")
        names = [r.name for r in self.runs]
        if len(set(names)) != len(names):
            raise InvalidSpec(f"run names must be unique, got {names}")
        for r in self.runs:
            if r.method not in METHODS:
                raise InvalidSpec(f"run {r.name!r}: unknown method {r.method!r}")
        bad = set(self.metrics) - set(ALL_METRICS)
        if bad:
            raise InvalidSpec(f"unknown metrics {sorted(bad)}")
        if "synthetic" in self.dataset:
            SyntheticSpec.from_json({**self.dataset["synthetic"], "seed": 0})
            return
        for key in ("embeddings", "labels", "gt_concepts"):
            path = self.dataset.get(key)
            if key != "gt_concepts" and path is None:
                raise InvalidSpec(f"file dataset needs {key!r}")
            if path is not None and not (Path(base_dir) / path).exists():
                raise InvalidSpec(f"dataset file {path} does not exist")

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset": self.dataset,
            "runs": [{"name": r.name, "method": r.method, "config": r.config} for r in self.runs],
            "metrics": list(self.metrics),
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_json(cls, obj) -> "ExperimentPlan":
        version = obj.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise InvalidSpec(f"unsupported plan schema_version {version}")
        return cls(obj["dataset"], obj["runs"], obj.get("seeds", []), obj.get("output_dir", "results"),
                   tuple(obj.get("metrics", ALL_METRICS)))

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        path = Path(path)
        plan = cls.from_json(json.loads(path.read_text()))
        base = path.parent
        if "synthetic" not in plan.dataset:
            plan.dataset = {k: (str(base / v) if k in ("embeddings", "labels", "gt_concepts") and v else v)
                            for k, v in plan.dataset.items()}
        if not Path(plan.output_dir).is_absolute():
            plan.output_dir = str(base / plan.output_dir)
        return plan


def load_dataset(dataset: dict, seed: int):
    """Centered embeddings, labeling and ground-truth concepts for one seed."""
    if "synthetic" in dataset:
        spec = SyntheticSpec.from_json({**dataset["synthetic"], "seed": seed})
        E, truth = generate(spec)
        Z, stats = center_standardize(E)
        return Z, truth.labeling, truth.base_concepts(stats)
    E = load_embeddings(dataset["embeddings"], dataset.get("format", "csv"))
    Z, stats = center_standardize(E)
    L = load_labels(dataset["labels"])
    gt = None
    if dataset.get("gt_concepts"):
        gt = align_gt(gt_from_json(json.loads(Path(dataset["gt_concepts"]).read_text()), stats), L)
    return Z, L, gt


def _default_k(run: RunSpec, L) -> dict:
    config = dict(run.config)
    if run.method == "cce":
        config.setdefault("M", len(L.sizes))
        config.setdefault("K", list(L.sizes))
    else:
        config.setdefault("K", L.total_concepts)
    return config


def execute_run(dataset: dict, run: RunSpec, seed: int, metrics) -> dict:
    """Run one (method, seed) pair and return its JSON record; never raises."""
    record = {"schema_version": SCHEMA_VERSION, "run": run.name, "method": run.method,
              "seed": seed, "config": run.config}
    try:
        Z, L, gt = load_dataset(dataset, seed)
        config = _default_k(run, L)
        concepts, _ = extract_concepts(run.method, Z, seed=seed, **config)
        report = evaluate(Z, L, concepts, gt=gt, metrics=metrics, seed=seed, method=run.method)
        record.update(status="ok", metrics=report.to_json())
    except (ConceptForgeError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("run %s seed %d failed: %s", run.name, seed, exc)
        record.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return record


def _run_file(out: Path, name: str, seed: int) -> Path:
    return out / RUNS_DIR / f"{name}__seed{seed}.json"


def max_workers() -> int:
    value = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(value))
    except ValueError:
        raise InvalidSpec(f"{THREADS_ENV} must be an integer, got {value!r}")


def run_plan(plan: ExperimentPlan, workers=None):
    """Execute every (run, seed) pair, then aggregate from the stored files.

    Returns ``(rows, ok)`` where ``rows`` is the aggregate table and ``ok``
    is True iff every run succeeded.
    """
    plan.validate()
    out = Path(plan.output_dir)
    (out / RUNS_DIR).mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(_dump(plan.to_json()))
    jobs = [(plan.dataset, run, seed, plan.metrics) for run in plan.runs for seed in plan.seeds]
    workers = workers or max_workers()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            records = list(pool.map(execute_run, *zip(*jobs)))
    else:
        records = [execute_run(*job) for job in jobs]
    for rec in records:
        _run_file(out, rec["run"], rec["seed"]).write_text(_dump(rec))
    rows = write_aggregates(out, order=[r.name for r in plan.runs])
    return rows, all(rec["status"] == "ok" for rec in records)


# ---------------------------------------------------------------------------
# aggregation and reports


def load_runs(results_dir) -> list:
    results_dir = Path(results_dir)
    folder = results_dir / RUNS_DIR if (results_dir / RUNS_DIR).is_dir() else results_dir
    files = sorted(folder.glob("*.json")) if folder.is_dir() else []
    records = []
    for f in files:
        rec = json.loads(f.read_text())
        if "run" in rec and "status" in rec:
            records.append(rec)
    if not records:
        raise MissingRuns(f"no run files found in {results_dir}")
    return records


def aggregate(records, order=None) -> list:
    """One row per run name: mean and population std over successful seeds."""
    groups = {}
    for rec in records:
        groups.setdefault(rec["run"], []).append(rec)
    names = list(order or []) + sorted(set(groups) - set(order or []))
    rows = []
    for name in names:
        if name not in groups:
            continue
        recs = sorted(groups[name], key=lambda r: r["seed"])
        ok = [r for r in recs if r["status"] == "ok"]
        row = {"run": name, "method": recs[0]["method"], "n_seeds": len(recs), "n_failed": len(recs) - len(ok)}
        for key, label in SUMMARY_METRICS:
            vals = [r["metrics"].get(key) for r in ok]
            vals = np.array([v for v in vals if v is not None], dtype=float)
            row[f"{label}_mean"] = float(vals.mean()) if vals.size else None
            row[f"{label}_std"] = float(vals.std()) if vals.size else None
        rows.append(row)
    return rows


def _columns():
    cols = ["run", "method", "n_seeds", "n_failed"]
    for _, label in SUMMARY_METRICS:
        cols += [f"{label}_mean", f"{label}_std"]
    return cols


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = _columns()
    w.writerow(cols)
    for row in rows:
        w.writerow([_fmt(row[c]) if isinstance(row[c], float) or row[c] is None else row[c] for c in cols])
    return buf.getvalue()


def _pm(row, label):
    m, s = row[f"{label}_mean"], row[f"{label}_std"]
    return "-" if m is None else f"{m:.4f} ± {s:.4f}"


def to_text(rows) -> str:
    header = ["run", "seeds"] + [label for _, label in SUMMARY_METRICS]
    body = [[r["run"], f"{r['n_seeds'] - r['n_failed']}/{r['n_seeds']}"] + [_pm(r, label) for _, label in SUMMARY_METRICS]
            for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(b) for b in body]) + "\n"


def to_markdown(rows) -> str:
    cols = [("comp", "Comp. score (lower is better)"), ("cosine", "Mean matched cosine"), ("map", "MAP")]
    lines = ["| Method | " + " | ".join(c for _, c in cols) + " |",
             "|---" * (len(cols) + 1) + "|"]
    for r in rows:
        lines.append(f"| {r['run']} | " + " | ".join(_pm(r, label) for label, _ in cols) + " |")
    return "\n".join(lines) + "\n"


def write_aggregates(results_dir, order=None) -> list:
    results_dir = Path(results_dir)
    prior = None
    plan_file = results_dir / "plan.json"
    if order is None and plan_file.exists():
        prior = [r["name"] for r in json.loads(plan_file.read_text())["runs"]]
    rows = aggregate(load_runs(results_dir), order or prior)
    (results_dir / AGGREGATE_CSV).write_text(to_csv(rows))
    (results_dir / SUMMARY_TXT).write_text(to_text(rows))
    return rows


def emit_report(results_dir, format: str = "markdown") -> str:
    """Render a method-by-metric comparison from stored run files."""
    results_dir = Path(results_dir)
    order = None
    if (results_dir / "plan.json").exists():
        order = [r["name"] for r in json.loads((results_dir / "plan.json").read_text())["runs"]]
    rows = aggregate(load_runs(results_dir), order)
    if format == "markdown":
        return to_markdown(rows)
    if format == "csv":
        return to_csv(rows)
    if format == "text":
        return to_text(rows)
    raise ValueError(f"unknown report format {format!r}")
