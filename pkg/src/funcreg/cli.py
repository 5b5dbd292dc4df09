"""Command-line interface.

Subcommands cover the full workflow: generate a benchmark, pretrain,
fine-tune with a chosen regularizer, sweep perturbations in four spaces,
run the regularizer ablation, interpolate weights between two checkpoints,
and collect runs into a comparison report. Every command writes delimited
files, SVG figures where a study has something to draw, and a manifest.json
recording the exact config, its hash, and wall-clock time.

Exit codes: 0 success; 2 bad usage or config; 3 unreadable or inconsistent
inputs; 4 numerical failure during a run. Logs go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis, config as cfgmod, data as datamod, plots, training
from .errors import (ConfigError, DataError, NumericError, ParseError,
                     StateError)
from .model import build_model, load_checkpoint, save_checkpoint
from .metrics import build_report
from .regularizers import RegularizerConfig

log = logging.getLogger("funcreg")


def _ckpt_base(path: str) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p


def _parse_seeds(text: str) -> tuple:
    try:
        seeds = tuple(int(tok) for tok in text.split(",") if tok.strip() != "")
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated ints, got {text!r}") \
            from None
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    return seeds


def _resolve_data(args, rc) -> tuple:
    """(spec, bench, input paths). --data wins over the config data section."""
    if getattr(args, "data", None):
        spec, bench = datamod.load_benchmark_dir(args.data)
        return spec, bench, [args.data]
    if rc is not None and rc.data is not None:
        log.info("generating benchmark in-memory from config data section")
        return rc.data, datamod.generate_benchmark(rc.data), []
    raise ConfigError("no data: pass --data DIR or put a 'data' section "
                      "in the config")


def _write_train_outputs(outdir: Path, m, runlog, bench) -> list:
    outdir.mkdir(parents=True, exist_ok=True)
    written = list(save_checkpoint(m, outdir / "model"))
    runlog.write_train_csv(outdir / "train_log.csv")
    runlog.write_eval_csv(outdir / "eval_log.csv")
    report = build_report(m, bench)
    report.write_csv(outdir / "metrics.csv")
    (outdir / "metrics.json").write_text(report.to_json() + "\n")
    written += [outdir / "train_log.csv", outdir / "eval_log.csv",
                outdir / "metrics.csv", outdir / "metrics.json"]
    for name, sm in sorted(report.per_split.items()):
        log.info("final %s: acc=%.4f loss=%.4f", name, sm.accuracy, sm.loss)
    log.info("final ood average acc=%.4f", report.ood_avg)
    return written


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    doc = cfgmod.load_json(args.spec)
    spec = datamod.benchmark_from_dict(doc)
    with cfgmod.Stopwatch() as sw:
        bench = datamod.generate_benchmark(spec)
        files = datamod.save_benchmark_dir(spec, bench, args.out)
    outputs = [Path(args.out) / f for f in files.values()]
    outputs.append(Path(args.out) / "benchmark.json")
    cfgmod.write_manifest(args.out, "gen-data", doc, [args.spec], outputs,
                          spec.seed, sw.elapsed)
    log.info("wrote %d splits to %s", len(files), args.out)
    return 0


def _run_training(args, phase: str) -> int:
    doc = cfgmod.load_json(args.config)
    rc = cfgmod.parse_run_config(doc)
    spec, bench, inputs = _resolve_data(args, rc)
    cfg = replace(rc.train, phase=phase)
    inputs = [args.config] + inputs
    with cfgmod.Stopwatch() as sw:
        if phase == "pretrain":
            m = build_model(bench.pretrain.dim, rc.model.hidden_widths,
                            rc.model.embed_dim, spec.n_classes,
                            seed=cfg.seed,
                            trainable_head=rc.model.trainable_head)
            runlog = training.pretrain(m, bench, cfg)
        else:
            m = load_checkpoint(_ckpt_base(args.init))
            inputs.append(args.init)
            runlog = training.finetune(m, bench, cfg)
        outdir = Path(args.out)
        outputs = _write_train_outputs(outdir, m, runlog, bench)
    doc_canon = cfgmod.run_config_to_dict(rc)
    doc_canon["train"]["phase"] = phase
    if phase == "pretrain":
        # pretraining always runs plain CE; record the effective method
        doc_canon["regularizer"]["method"] = "none"
    cfgmod.write_manifest(outdir, phase, doc_canon, inputs, outputs,
                          cfg.seed, sw.elapsed)
    return 0


def cmd_pretrain(args) -> int:
    return _run_training(args, "pretrain")


def cmd_finetune(args) -> int:
    return _run_training(args, "finetune")


def cmd_perturb(args) -> int:
    doc = cfgmod.load_json(args.spec)
    pspec = cfgmod.parse_perturbation_spec(doc)
    m = load_checkpoint(_ckpt_base(args.model))
    _, bench, _ = _resolve_data(args, None)
    with cfgmod.Stopwatch() as sw:
        report = analysis.run_perturbation_study(m, pspec, bench)
        outdir = Path(args.out)
        report.write_records_csv(outdir / "records.csv")
        report.write_aggregates_csv(outdir / "aggregates.csv")
        report.write_baseline_csv(outdir / "baseline.csv")
        outputs = [outdir / "records.csv", outdir / "aggregates.csv",
                   outdir / "baseline.csv"]
        for split in sorted(report.baseline):
            outputs.append(plots.perturbation_figure(
                report, split, outdir / f"perturbation_{split}.svg"))
    cfgmod.write_manifest(outdir, "perturb", doc,
                          [args.model, args.spec, args.data], outputs,
                          pspec.seed, sw.elapsed)
    log.info("swept %d records over %d spaces", len(report.records),
             len(pspec.spaces))
    return 0


def cmd_ablate(args) -> int:
    doc = cfgmod.load_json(args.config)
    rc = cfgmod.parse_run_config(doc)
    seeds = _parse_seeds(args.seeds)
    spec, bench, inputs = _resolve_data(args, rc)
    ft_cfg = replace(rc.train, phase="finetune")
    pre_epochs = args.pretrain_epochs if args.pretrain_epochs else ft_cfg.epochs
    pre_cfg = replace(ft_cfg, phase="pretrain", epochs=pre_epochs,
                      regularizer=RegularizerConfig(method="none"))
    with cfgmod.Stopwatch() as sw:
        table = analysis.run_ablation(bench, rc.model, pre_cfg, ft_cfg, seeds)
        outdir = Path(args.out)
        table.write_csv(outdir / "ablation.csv")
        fig = plots.ablation_figure(table, outdir / "ablation.svg")
    doc_canon = cfgmod.run_config_to_dict(rc)
    doc_canon["seeds"] = list(seeds)
    cfgmod.write_manifest(outdir, "ablate", doc_canon,
                          [args.config] + inputs,
                          [outdir / "ablation.csv", fig], seeds[0], sw.elapsed)
    for r in table.rows:
        log.info("%s: id=%.4f ood=%.4f (gain id=%+.4f ood=%+.4f)", r.variant,
                 r.id_acc_mean, r.ood_acc_mean, r.id_gain_mean, r.ood_gain_mean)
    return 0


def cmd_interpolate(args) -> int:
    alphas = analysis.parse_alpha_range(args.alphas)
    pre = load_checkpoint(_ckpt_base(args.pretrained))
    ft = load_checkpoint(_ckpt_base(args.finetuned))
    _, bench, _ = _resolve_data(args, None)
    with cfgmod.Stopwatch() as sw:
        records = analysis.run_interpolation_sweep(pre, ft, alphas,
                                                   bench.eval_splits())
        outdir = Path(args.out)
        analysis.write_interpolation_csv(records, outdir / "interpolation.csv")
        fig = plots.interpolation_figure(records, outdir / "interpolation.svg")
    doc = {"alphas": alphas, "pretrained": str(args.pretrained),
           "finetuned": str(args.finetuned)}
    cfgmod.write_manifest(outdir, "interpolate", doc,
                          [args.pretrained, args.finetuned, args.data],
                          [outdir / "interpolation.csv", fig], None, sw.elapsed)
    return 0


def _collect_run(rundir: Path) -> dict:
    manifest_path = rundir / "manifest.json"
    if not manifest_path.exists():
        raise ParseError(f"no manifest.json under run dir {rundir}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed manifest {manifest_path}: {e}") from e
    cfg = manifest.get("config", {})
    row = {
        "run": rundir.name,
        "phase": cfg.get("train", {}).get("phase", manifest.get("command", "")),
        "method": cfg.get("regularizer", {}).get("method", ""),
        "seed": manifest.get("seed", ""),
        "id_acc": "",
        "ood_avg": "",
    }
    metrics_path = rundir / "metrics.json"
    if metrics_path.exists():
        try:
            doc = json.loads(metrics_path.read_text())
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed metrics {metrics_path}: {e}") from e
        splits = doc.get("splits", {})
        if "id_test" in splits:
            row["id_acc"] = float(splits["id_test"]["acc"])
        if "ood_avg" in doc:
            row["ood_avg"] = float(doc["ood_avg"])
    return row


def cmd_report(args) -> int:
    import csv as _csv

    rows = []
    with cfgmod.Stopwatch() as sw:
        for rundir in args.runs:
            rundir = Path(rundir)
            if not rundir.is_dir():
                raise ParseError(f"run dir not found: {rundir}")
            rows.append(_collect_run(rundir))
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            w = _csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "phase", "method", "seed", "id_acc", "ood_avg"])
            for r in rows:
                w.writerow([r["run"], r["phase"], r["method"], r["seed"],
                            "" if r["id_acc"] == "" else repr(r["id_acc"]),
                            "" if r["ood_avg"] == "" else repr(r["ood_avg"])])
        fig = plots.report_figure(rows, out.with_suffix(".svg"))
    cfgmod.write_manifest(out.parent, "report", {"runs": [str(r) for r in args.runs]},
                          list(args.runs), [out, fig], None, sw.elapsed)
    log.info("collected %d runs into %s", len(rows), out)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="funcreg",
        description="functional-regularization fine-tuning lab")
    p.add_argument("-q", "--quiet", action="store_true",
                   help="only warnings and errors on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a benchmark to CSV splits")
    g.add_argument("--spec", required=True, help="benchmark spec JSON")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    for name, fn, needs_init in (("pretrain", cmd_pretrain, False),
                                 ("finetune", cmd_finetune, True)):
        t = sub.add_parser(name, help=f"{name} a model and log metrics")
        t.add_argument("--config", required=True, help="run config JSON")
        t.add_argument("--data", help="benchmark directory (from gen-data)")
        t.add_argument("--out", required=True, help="output directory")
        if needs_init:
            t.add_argument("--init", required=True,
                           help="checkpoint base path to start from")
        t.set_defaults(func=fn)

    pe = sub.add_parser("perturb", help="four-space perturbation sweep")
    pe.add_argument("--model", required=True, help="checkpoint base path")
    pe.add_argument("--spec", required=True, help="perturbation spec JSON")
    pe.add_argument("--data", required=True, help="benchmark directory")
    pe.add_argument("--out", required=True, help="output directory")
    pe.set_defaults(func=cmd_perturb)

    ab = sub.add_parser("ablate", help="regularizer ablation over seeds")
    ab.add_argument("--config", required=True, help="run config JSON")
    ab.add_argument("--data", help="benchmark directory")
    ab.add_argument("--seeds", required=True, help="comma-separated ints")
    ab.add_argument("--pretrain-epochs", type=int, default=0,
                    help="override pretraining epochs (default: train.epochs)")
    ab.add_argument("--out", required=True, help="output directory")
    ab.set_defaults(func=cmd_ablate)

    it = sub.add_parser("interpolate", help="weight-space interpolation sweep")
    it.add_argument("--pretrained", required=True, help="checkpoint base path")
    it.add_argument("--finetuned", required=True, help="checkpoint base path")
    it.add_argument("--data", required=True, help="benchmark directory")
    it.add_argument("--alphas", default="0:1:0.1",
                    help="start:end:step, endpoints included")
    it.add_argument("--out", required=True, help="output directory")
    it.set_defaults(func=cmd_interpolate)

    rp = sub.add_parser("report", help="collect finished runs into one table")
    rp.add_argument("--runs", required=True, nargs="+",
                    help="run output directories")
    rp.add_argument("--out", required=True, help="output CSV path")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("%s", e)
        return 2
    except (ParseError, DataError, StateError) as e:
        log.error("%s", e)
        return 3
    except NumericError as e:
        log.error("numerical failure: %s", e)
        return 4


if __name__ == "__main__":
    sys.exit(main())
