"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 baseline gate failure,
4 runtime abort (attack divergence, degenerate embeddings, I/O).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .decoygen import AttackAbort, AttackConfig, generate_decoy
from .embednet import DEFAULT_SMOOTHING, EmbedNet, ModelEnsemble, load_model, save_model
from .lookup import build, identify_top1_batch, load_store, save_store, write_neighbors_csv
from .metrics import evaluate
from .numerics import DegenerateVectorError, FormatError, ShapeError, read_image, write_image
from .synthpeople import SynthDatasetSpec, generate
from .transforms import resolve_preset

EXIT_CONFIG, EXIT_GATE, EXIT_ABORT = 2, 3, 4
DATA_MANIFEST = "dataset.tsv"


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _config_text(args) -> str | None:
    return Path(args.config).read_text(encoding="utf-8") if args.config else None


def _dataset_spec(args) -> SynthDatasetSpec:
    spec = SynthDatasetSpec()
    text = _config_text(args)
    if text:
        spec = harness.parse_config(text if "[scenario]" in text else "[scenario]\nname = community-sweep\n" + text).dataset
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    return spec


def _load_models(paths, shape=None):
    return [load_model(p, shape) for p in paths]


def _read_dataset(directory):
    directory = Path(directory)
    rows = []
    with open(directory / DATA_MANIFEST, encoding="utf-8", newline="") as fh:
        for pid, ident, role, path in csv.reader(fh, delimiter="\t"):
            rows.append((pid, ident, role, read_image(directory / path)))
    return rows


def cmd_gen_data(args):
    spec = _dataset_spec(args)
    ds = generate(spec)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / DATA_MANIFEST, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for role, records in (("clean", ds.clean_records()), ("query", ds.query_records())):
            for pid, ident, img in records:
                rel = f"images/{pid}.fgi"
                write_image(out / rel, img)
                w.writerow([pid, ident, role, rel])
    print(f"wrote {len(ds.identities)} identities to {out}")
    return 0


def cmd_train_model(args):
    seed = 1 if args.seed is None else args.seed
    model = EmbedNet.from_seed(seed, (args.side, args.side, args.channels), hidden=args.hidden, dim=args.dim,
                               smoothing=args.smoothing)
    out = Path(args.out)
    path = out if out.suffix else out / f"{model.model_id}.fgm"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(path, model)
    print(path)
    return 0


def cmd_attack(args):
    x = read_image(args.source)
    models = _load_models(args.model, x.shape)
    target_img = read_image(args.target)
    targets = np.stack([m.forward(target_img) for m in models])
    transforms = tuple(resolve_preset(args.preset, min(x.shape[:2]), noise_std=args.noise_std))
    cfg = AttackConfig(ModelEnsemble(tuple(models)), args.eps, alpha=args.alpha, max_iters=args.iters,
                       patience=args.patience or None, step_rule=args.step_rule, transforms=transforms,
                       seed=0 if args.seed is None else args.seed)
    res = generate_decoy(x, targets, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_image(out / "adversarial.fgi", res.adversarial)
    (out / "log.jsonl").write_text("".join(line + "\n" for line in res.log_lines()), encoding="utf-8")
    (out / "attack.json").write_text(json.dumps(dict(cfg.resolved(), final_loss=res.final_loss,
                                                     iterations=res.iterations, satisfied=res.satisfied),
                                                indent=1) + "\n", encoding="utf-8")
    print(f"final loss {res.final_loss:.6g} after {res.iterations} iterations")
    return 0 if res.satisfied else EXIT_ABORT


def cmd_build_lookup(args):
    rows = [r for r in _read_dataset(args.data) if r[2] in ("clean", "decoy")]
    models = _load_models(args.model, rows[0][3].shape if rows else None)
    store = build(rows, models)
    save_store(store, args.out)
    print(f"{len(store)} entries, {store.n_identities} identities -> {args.out}")
    return 0


def _queries(args):
    rows = [r for r in _read_dataset(args.data) if r[2] == "query"]
    return [r[0] for r in rows], [r[1] for r in rows], np.stack([r[3] for r in rows])


def cmd_query(args):
    store = load_store(args.store)
    ids, truth, imgs = _queries(args)
    model = _load_models([args.model], imgs.shape[1:])[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_neighbors_csv(out / "neighbors.csv", store, ids, model.embed_batch(imgs), args.k, model.model_id)
    if args.tau is not None:
        answers = identify_top1_batch(store, imgs, model, args.tau)
        with open(out / "top1.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query_id", "identity", "answer", "correct"])
            for q, t, a in zip(ids, truth, answers):
                w.writerow([q, t, a or "", int(a == t)])
    print(out / "neighbors.csv")
    return 0


def cmd_eval(args):
    store = load_store(args.store)
    ids, truth, imgs = _queries(args)
    model = _load_models([args.model], imgs.shape[1:])[0]
    key = dict(strategy="none", epsilon=0.0, decoy_ratio=0.0, round=1, model_gen="", model_eval=model.model_id)
    record = harness.RunRecord(harness.scenario_defaults("community-sweep"))
    record.reports = evaluate(store, model, imgs, ids, truth, _ints(args.k), key)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(harness.metrics_csv(record), encoding="utf-8")
    sys.stdout.write(harness.metrics_csv(record))
    return 0


def cmd_scenario(args):
    text = _config_text(args) or f"[scenario]\nname = {args.name}\n"
    cfg = harness.parse_config(_with_name(text, args.name), seed=args.seed, out=args.out)
    record = harness.run_scenario(cfg)
    files = harness.emit_report(record, cfg.out)
    print(f"{cfg.scenario}: {len(record.reports)} cells, {record.n_decoys} attacked photos, "
          f"{record.violations} constraint violations, {record.wall_clock:.1f}s -> {cfg.out} ({len(files)} files)")
    return 0


def _with_name(text, name):
    if not name:
        return text
    if "[scenario]" not in text:
        return f"[scenario]\nname = {name}\n" + text
    lines = [ln for ln in text.splitlines() if not ln.strip().startswith("name")]
    i = next(j for j, ln in enumerate(lines) if ln.strip() == "[scenario]")
    lines.insert(i + 1, f"name = {name}")
    return "\n".join(lines) + "\n"


def cmd_report(args):
    runs = [Path(r) for r in args.runs]
    rows = []
    for r in runs:
        rows.extend(harness.read_metrics_csv(r / "metrics.csv"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pooled = harness.pooled(rows)
    header = ["strategy", "epsilon", "k", "decoy_ratio", "round", "recall_mean", "discovery_mean", "idunif_mean",
              "n_queries", "n_models"]
    (out / "pooled.csv").write_text(harness._csv_text(header, [[p[h] for h in header] for p in pooled]),
                                    encoding="utf-8")
    print(out / "pooled.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decoylab", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--out", default=None, help="output path")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write the synthetic dataset as FGI1 images plus a TSV manifest")
    s.set_defaults(func=cmd_gen_data, out_default="data")

    s = sub.add_parser("train-model", help="draw an embedding model from a seed and save it (FGM1)")
    s.add_argument("--side", type=int, default=32)
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--hidden", type=int, default=64)
    s.add_argument("--dim", type=int, default=128)
    s.add_argument("--smoothing", type=float, default=DEFAULT_SMOOTHING)
    s.set_defaults(func=cmd_train_model, out_default="models")

    s = sub.add_parser("attack", help="generate one decoy")
    s.add_argument("--model", action="append", required=True, help="FGM1 file; repeat for an ensemble")
    s.add_argument("--source", required=True, help="FGI1 image to perturb")
    s.add_argument("--target", required=True, help="FGI1 image whose embedding is the target")
    s.add_argument("--eps", type=float, default=0.06)
    s.add_argument("--alpha", type=float, default=0.1)
    s.add_argument("--iters", type=int, default=400)
    s.add_argument("--patience", type=int, default=10, help="0 disables early stopping")
    s.add_argument("--step-rule", default="raw", choices=("sign", "raw", "normalized"))
    s.add_argument("--preset", default="none", help="transform preset: none or eot-appendix-c")
    s.add_argument("--noise-std", type=float, default=0.5)
    s.set_defaults(func=cmd_attack, out_default="attack")

    s = sub.add_parser("build-lookup", help="embed a dataset's clean photos into a store")
    s.add_argument("--data", required=True)
    s.add_argument("--model", action="append", required=True)
    s.set_defaults(func=cmd_build_lookup, out_default="store")

    s = sub.add_parser("query", help="nearest neighbors (and optional top-1 answers) for the dataset's queries")
    s.add_argument("--store", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--tau", type=float, default=None, help="top-1 oracle threshold")
    s.set_defaults(func=cmd_query, out_default="query")

    s = sub.add_parser("eval", help="privacy metrics of a store for the dataset's queries")
    s.add_argument("--store", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--k", default="1,5,10,50,100")
    s.set_defaults(func=cmd_eval, out_default="eval")

    s = sub.add_parser("scenario", help="run a named experiment and write CSV/SVG/run record")
    s.add_argument("name", nargs="?", choices=harness.SCENARIOS)
    s.set_defaults(func=cmd_scenario, out_default=None)

    s = sub.add_parser("report", help="pool metrics.csv files across runs")
    s.add_argument("runs", nargs="+")
    s.set_defaults(func=cmd_report, out_default="report")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out is None:
        args.out = args.out_default
    if args.command == "scenario" and not args.name and not args.config:
        parser.error("scenario needs a name or --config")
    try:
        return args.func(args)
    except (harness.ConfigError, configparser.Error) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.GateFailure as exc:
        print(f"gate failure: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (AttackAbort, DegenerateVectorError, FormatError, ShapeError, OSError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
