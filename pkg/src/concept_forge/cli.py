"""Command-line entry point: ``concept-forge <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .cce import CCEConfig
from .embedding_store import FORMATS, center_standardize, load_embeddings, load_labels, save_embeddings, save_labels
from .errors import ConceptForgeError
from .concepts import ConceptSet
from .metrics import ALL_METRICS, SCHEMA_VERSION, evaluate
from .pipeline import METHODS, ExperimentPlan, align_gt, emit_report, extract_concepts, gt_from_json, run_plan
from .synthetic import MODES, SyntheticSpec, generate

log = logging.getLogger("concept_forge")
_D = CCEConfig()


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def cmd_synth(args):
    spec = SyntheticSpec(d=args.d, attribute_sizes=tuple(_ints(args.sizes)), samples_per_composite=args.n,
                         noise_scale=args.noise, seed=args.seed, mode=args.mode, interaction=args.interaction)
    E, truth = generate(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = "csv" if args.format == "csv" else "f32"
    save_embeddings(E, out / f"embeddings.{ext}", args.format)
    save_labels(truth.labeling, out / "labels.csv")
    gt = truth.to_json()
    gt["names"] = truth.labeling.concept_names()
    gt["spec"] = spec.to_json()
    _write_json(gt, out / "ground_truth.json")
    log.info("wrote %d samples to %s", E.n, out)
    return 0


def cmd_extract(args):
    Z, stats = center_standardize(load_embeddings(args.in_embeddings, args.in_format))
    if args.method == "cce":
        K = _ints(args.k) if args.k else [_D.K]
        params = dict(M=args.m, K=K[0] if len(K) == 1 else tuple(K), S=args.s, learning_rate=args.lr,
                      reg_weight=args.reg_weight, max_alternations=args.max_iters, conv_tol=args.tol,
                      restarts=args.restarts)
    else:
        if not args.k:
            raise SystemExit("--k is required for baseline methods")
        params = dict(K=sum(_ints(args.k)))
        if args.method == "dictlearn":
            params.update(lam=args.lam, iters=args.iters)
        elif args.method == "seminmf":
            params.update(iters=args.iters)
    concepts, extra = extract_concepts(args.method, Z, seed=args.seed, **params)
    out = {"schema_version": SCHEMA_VERSION, "method": args.method, "seed": args.seed,
           "concepts": concepts.to_json(), "centering": {"mean": stats.mean.tolist(), "std": stats.std.tolist()}}
    out.update({k: v for k, v in extra.items() if k != "method"})
    _write_json(out, args.out)
    return 0


def cmd_eval(args):
    Z, stats = center_standardize(load_embeddings(args.embeddings, args.in_format))
    L = load_labels(args.labels)
    obj = json.loads(Path(args.concepts).read_text())
    concepts = ConceptSet.from_json(obj.get("concepts", obj))
    gt = None
    if args.gt_concepts:
        gt = align_gt(gt_from_json(json.loads(Path(args.gt_concepts).read_text()), stats), L)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    report = evaluate(Z, L, concepts, gt=gt, metrics=metrics, seed=args.seed, method=obj.get("method", ""))
    _write_json(report.to_json(per_sample=args.per_sample), args.out)
    return 0


def cmd_run_plan(args):
    plan = ExperimentPlan.load(args.plan)
    if args.output_dir:
        plan.output_dir = args.output_dir
    rows, ok = run_plan(plan, workers=args.workers)
    sys.stdout.write((Path(plan.output_dir) / "summary.txt").read_text())
    if not ok:
        failed = sum(r["n_failed"] for r in rows)
        log.error("%d run(s) failed; see %s/runs", failed, plan.output_dir)
    return 0 if ok else 1


def cmd_report(args):
    text = emit_report(args.results_dir, args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="concept-forge", description="Compositional concept extraction from embedding matrices.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset with known ground truth")
    s.add_argument("--d", type=int, default=512, help="embedding dimension (>= 8)")
    s.add_argument("--sizes", default="3,3", help="concepts per attribute, comma separated")
    s.add_argument("--n", type=int, default=100, help="samples per composite")
    s.add_argument("--noise", type=float, default=0.0, help="isotropic noise scale")
    s.add_argument("--seed", type=int, default=0, help="RNG seed")
    s.add_argument("--mode", choices=MODES, default="iid", help="composite model: i.i.d. draws or additive bases plus interaction")
    s.add_argument("--interaction", type=float, default=1.0, help="interaction scale for --mode additive")
    s.add_argument("--format", choices=FORMATS, default="csv", help="embedding file format")
    s.add_argument("--out-dir", required=True, help="directory for embeddings, labels.csv and ground_truth.json")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("extract", help="extract concepts from an embedding file")
    e.add_argument("--method", choices=METHODS, default="cce", help="extractor")
    e.add_argument("--in-embeddings", required=True, help="embedding file")
    e.add_argument("--in-format", choices=FORMATS, default="csv", help="embedding file format")
    e.add_argument("--k", help="concepts per attribute (cce: scalar or comma list; baselines: total, lists are summed)")
    e.add_argument("--m", type=int, default=_D.M, help="cce: number of attributes")
    e.add_argument("--s", type=int, default=_D.S, help="cce: subspace dimension")
    e.add_argument("--lr", type=float, default=_D.learning_rate, help="cce: learning rate")
    e.add_argument("--reg-weight", type=float, default=_D.reg_weight, help="cce: weight of the centroid-matching term (0 disables)")
    e.add_argument("--max-iters", type=int, default=_D.max_alternations, help="cce: alternation cap")
    e.add_argument("--tol", type=float, default=_D.conv_tol, help="cce: relative objective change for convergence")
    e.add_argument("--restarts", type=int, default=_D.restarts, help="cce: random restarts per attribute, best objective kept")
    e.add_argument("--lambda", dest="lam", type=float, default=0.1, help="dictlearn: L1 weight")
    e.add_argument("--iters", type=int, default=200, help="dictlearn/seminmf: iteration cap")
    e.add_argument("--seed", type=int, default=0, help="RNG seed")
    e.add_argument("--out", default="-", help="output JSON path ('-' for stdout)")
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("eval", help="score a concept set against labeled embeddings")
    v.add_argument("--concepts", required=True, help="JSON from `extract` or a bare ConceptSet JSON")
    v.add_argument("--embeddings", required=True, help="embedding file")
    v.add_argument("--in-format", choices=FORMATS, default="csv", help="embedding file format")
    v.add_argument("--labels", required=True, help="labels CSV aligned with the embeddings")
    v.add_argument("--gt-concepts", help="ground-truth concepts (ConceptSet JSON or synth ground_truth.json); default: per-concept sample means")
    v.add_argument("--metrics", default=",".join(ALL_METRICS), help=f"comma list from {','.join(ALL_METRICS)}")
    v.add_argument("--seed", type=int, default=0, help="seed for train/test splits")
    v.add_argument("--per-sample", action="store_true", help="include per-sample compositionality residuals")
    v.add_argument("--out", default="-", help="report JSON path ('-' for stdout)")
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("run-plan", help="execute an experiment plan (parallelism capped by CONCEPT_FORGE_THREADS)")
    r.add_argument("plan", help="plan JSON file")
    r.add_argument("--output-dir", help="override the plan's output_dir")
    r.add_argument("--workers", type=int, help="parallel runs (default: CONCEPT_FORGE_THREADS or 1)")
    r.set_defaults(func=cmd_run_plan)

    t = sub.add_parser("report", help="render a comparison table from stored run files")
    t.add_argument("results_dir", help="directory written by run-plan")
    t.add_argument("--format", choices=("markdown", "csv", "text"), default="markdown", help="output format")
    t.add_argument("--out", help="output path (default stdout)")
    t.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConceptForgeError, ValueError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
