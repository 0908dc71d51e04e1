"""Command-line front end: pretrain, evaluate, ood-eval, plot, make-data.

One JSON run-config file drives every command; dotted-key overrides
(``--set section.key=value``) patch it without editing. Failures print a
single machine-parsable line ``fewsar-error: <category>: <message>`` on
stderr and exit with 2 (config error), 3 (data error), or 4 (runtime
error).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .config import (
    RunConfig,
    build_encoder_from_config,
    build_ood_sets,
    build_pool,
    default_run_config_dict,
    load_run_config,
)
from .data import make_fake_data, save_manifest
from .errors import (
    ConfigurationError,
    DataError,
    FewsarError,
    MetricError,
    ParameterError,
    ProtocolViolationError,
    SamplingError,
)
from .ood import load_scores
from .pretrain import (
    arch_hash,
    extract_features,
    load_encoder,
    pretrain,
    save_encoder,
    save_training_log,
)


class CliFailure(Exception):
    def __init__(self, category: str, code: int, message: str):
        super().__init__(message)
        self.category = category
        self.code = code


def _fail_from(exc: Exception) -> CliFailure:
    if isinstance(exc, CliFailure):
        return exc
    if isinstance(exc, (ConfigurationError, ParameterError)):
        return CliFailure("config-invalid", 2, str(exc))
    if isinstance(exc, (DataError, SamplingError, ProtocolViolationError, MetricError)):
        return CliFailure(exc.category, 3, str(exc))
    if isinstance(exc, FewsarError):
        return CliFailure(exc.category, 4, str(exc))
    return CliFailure("internal", 4, f"{type(exc).__name__}: {exc}")


def _load_config(args) -> tuple[RunConfig, Path]:
    if args.config is None:
        raise CliFailure("config-not-found", 2, "no --config file given")
    path = Path(args.config)
    if not path.exists():
        raise CliFailure("config-not-found", 2, f"config file does not exist: {path}")
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"experiment.master_seed={args.seed}")
        overrides.append(f"ssl.seed={args.seed}")
    if getattr(args, "workers", None) is not None:
        overrides.append(f"experiment.workers={args.workers}")
    return load_run_config(path, overrides), path.parent


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _write_jsonl(path: Path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _augment_hash(cfg: RunConfig) -> str:
    from dataclasses import asdict

    return hashlib.sha256(
        json.dumps(asdict(cfg.augment), sort_keys=True).encode()
    ).hexdigest()[:16]


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg, base = _load_config(args)
    pool = build_pool(cfg.pretrain_data, base)
    encoder = build_encoder_from_config(cfg.encoder)
    encoder, log = pretrain(pool, cfg.augment, cfg.ssl, encoder)
    out = Path(args.out or "encoder.npz")
    save_encoder(
        out,
        encoder,
        ssl_cfg=cfg.ssl,
        extra={"augment_hash": _augment_hash(cfg), "seed": cfg.ssl.seed},
    )
    save_training_log(out.with_suffix(".log.jsonl"), log)
    final = log[-1]["mean_loss"] if log else float("nan")
    print(f"pretrain: wrote {out} (arch {arch_hash(encoder.arch)}, final loss {final:.4f})")
    return 0


def _ssl_oe_features(cfg, base, encoder):
    if cfg.pretrain_data.synthetic is None and cfg.pretrain_data.manifest is None:
        raise ConfigurationError(
            "method 'ssl-oe' requires a pretrain_data pool for outlier exposure"
        )
    oe_pool = build_pool(cfg.pretrain_data, base)
    return oe_pool, extract_features(encoder, oe_pool)


def cmd_evaluate(args) -> int:
    cfg, base = _load_config(args)
    encoder, _ = load_encoder(args.checkpoint)
    pool = build_pool(cfg.task_data, base)
    exp = cfg.experiment
    oe_features = None
    if "ssl-oe" in exp.methods:
        _, oe_features = _ssl_oe_features(cfg, base, encoder)

    protocols = [("SOC", "SOC-test")]
    if exp.include_eoc:
        protocols.append(("EOC", "EOC-test"))

    out_dir = Path(args.out or "results")
    records, tables = [], {}
    for protocol, query_condition in protocols:
        summaries = []
        for method in exp.methods:
            model = {"scratch-small": "small_conv", "scratch-deep": "deep_conv"}.get(
                method, encoder
            )
            mode = "oe" if method == "ssl-oe" else "basic"
            for m in exp.ways:
                for n in exp.shots:
                    accs = ev.accuracy_runs(
                        model,
                        pool,
                        m,
                        n,
                        exp.num_runs,
                        mode=mode,
                        fsl_cfg=cfg.fsl,
                        oe_features=oe_features,
                        master_seed=exp.master_seed,
                        query_per_class=exp.query_per_class,
                        query_condition=query_condition,
                        workers=exp.workers,
                    )
                    mean, ci = ev.mean_ci95(accs)
                    summaries.append(
                        ev.AccuracySummary(m, n, method, mean, ci, exp.num_runs)
                    )
                    records.extend(
                        {
                            "protocol": protocol,
                            "method": method,
                            "ways": m,
                            "shots": n,
                            "run": r,
                            "accuracy": a,
                        }
                        for r, a in enumerate(accs)
                    )
        tables[protocol] = ev.render_accuracy_table(summaries, exp.ways, exp.shots)

    _write_text(out_dir / "accuracy_table.txt", tables["SOC"])
    if "EOC" in tables:
        _write_text(out_dir / "eoc_table.txt", tables["EOC"])
    _write_jsonl(out_dir / "accuracy_records.jsonl", records)
    for protocol in tables:
        print(f"[{protocol}]")
        print(tables[protocol])
    return 0


def cmd_ood_eval(args) -> int:
    cfg, base = _load_config(args)
    encoder, _ = load_encoder(args.checkpoint)
    pool = build_pool(cfg.task_data, base)
    exp = cfg.experiment
    oe_pool, oe_features = _ssl_oe_features(cfg, base, encoder)
    ood_sets = build_ood_sets(cfg.ood)

    out_dir = Path(args.out or "results")
    blocks, records = [], []
    for m in exp.ways:
        for n in exp.shots:
            report, recs, score_sets = ev.run_ood_experiment(
                encoder,
                pool,
                ood_sets,
                m,
                n,
                exp.num_runs,
                detector_cfg=cfg.detector,
                fsl_cfg=cfg.fsl,
                oe_pool=oe_pool,
                oe_features=oe_features,
                master_seed=exp.master_seed,
                holdout_count=cfg.ood.holdout_count,
                query_per_class=exp.query_per_class,
                include_eoc_scores=exp.include_eoc,
                workers=exp.workers,
            )
            blocks.append(ev.render_ood_table(report))
            records.extend({**r, "ways": m, "shots": n} for r in recs)
            from .ood import save_scores

            save_scores(out_dir / f"scores_{m}way_{n}shot.jsonl", score_sets)
    _write_text(out_dir / "ood_table.txt", "\n".join(blocks))
    _write_jsonl(out_dir / "ood_records.jsonl", records)
    print("\n".join(blocks))
    return 0


def cmd_plot(args) -> int:
    score_sets = []
    merged: dict = {}
    order = []
    for f in args.scores:
        path = Path(f)
        if not path.exists():
            raise CliFailure("empty-scores", 3, f"score file does not exist: {path}")
        try:
            sets = load_scores(path)
        except MetricError as exc:
            raise CliFailure("empty-scores", 3, str(exc)) from exc
        for ss in sets:
            if ss.group not in merged:
                merged[ss.group] = []
                order.append(ss.group)
            merged[ss.group].extend(ss.scores)
    from .ood import ScoreSet

    score_sets = [ScoreSet(scores=tuple(merged[g]), group=g) for g in order]
    if not score_sets or all(len(s.scores) == 0 for s in score_sets):
        raise CliFailure("empty-scores", 3, "no score records found in input files")

    plot_cfg, ways = None, args.ways
    if args.config is not None:
        cfg, _ = _load_config(args)
        plot_cfg = cfg.plot
        if ways is None:
            ways = cfg.experiment.ways[0]
    if plot_cfg is None:
        from .config import PlotConfig

        plot_cfg = PlotConfig()
    if ways is None:
        min_score = min(min(s.scores) for s in score_sets)
        ways = max(2, int(round(1.0 / min_score)))

    export = ev.export_score_densities(
        score_sets, plot_cfg.bins, ways, tuple(plot_cfg.tpr_targets)
    )
    out = Path(args.out or "densities.png")
    _write_jsonl(out.with_suffix(".hist.jsonl"), ev.density_table_rows(export))

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for group in sorted(export["densities"]):
        ax.stairs(export["densities"][group], export["edges"], label=group, fill=True, alpha=0.35)
    for group, marks in sorted(export["markers"].items()):
        for t, beta in sorted(marks.items()):
            ax.axvline(beta, linestyle="--", linewidth=1.0)
            ax.text(beta, ax.get_ylim()[1] * 0.95, f"{group}@{t:.0%}", rotation=90,
                    va="top", ha="right", fontsize=7)
    ax.set_xlabel("ID score")
    ax.set_ylabel("density")
    ax.legend(loc="upper center", fontsize=8)
    fig.tight_layout()
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120, metadata={"Software": None})
    plt.close(fig)
    print(f"plot: wrote {out} and {out.with_suffix('.hist.jsonl')}")
    return 0


def cmd_make_data(args) -> int:
    cfg, base = _load_config(args)
    if args.which == "task":
        pool = build_pool(cfg.task_data, base)
    elif args.which == "pretrain":
        pool = build_pool(cfg.pretrain_data, base)
    else:
        fd = cfg.ood.fake_data
        if fd is None:
            raise ConfigurationError("make-data fake needs an ood.fake_data section")
        pool = make_fake_data(fd.n, fd.size, fd.seed)
    out_dir = Path(args.out or f"data_{args.which}")
    manifest = save_manifest(pool, out_dir, image_format=args.format)
    print(f"make-data: wrote {len(pool)} chips to {manifest}")
    return 0


def cmd_show_config(args) -> int:
    print(json.dumps(default_run_config_dict(), indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# entry point


def _add_common(p, out_help):
    p.add_argument("--config", help="path to the JSON run-config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted-key config override (repeatable)")
    p.add_argument("--seed", type=int, help="override master and SSL seeds")
    p.add_argument("--workers", type=int, help="parallel workers for multi-run commands")
    p.add_argument("--out", help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewsar",
        description="Robust few-shot chip classification: pretrain, evaluate, detect.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="stage-1 self-supervised pretraining")
    _add_common(p, "checkpoint output path (default encoder.npz)")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("evaluate", help="few-shot accuracy grid (SOC and optional EOC)")
    _add_common(p, "output directory (default results/)")
    p.add_argument("--checkpoint", required=True, help="encoder checkpoint from pretrain")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ood-eval", help="paired basic/OE detection evaluation")
    _add_common(p, "output directory (default results/)")
    p.add_argument("--checkpoint", required=True, help="encoder checkpoint from pretrain")
    p.set_defaults(fn=cmd_ood_eval)

    p = sub.add_parser("plot", help="score density plot with TPR threshold markers")
    _add_common(p, "output image path (default densities.png)")
    p.add_argument("--scores", nargs="+", required=True, help="score files from ood-eval")
    p.add_argument("--ways", type=int, help="number of classes (sets the score grid floor)")
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("make-data", help="export a synthetic pool as manifest + images")
    _add_common(p, "output directory")
    p.add_argument("--which", choices=("task", "pretrain", "fake"), default="task")
    p.add_argument("--format", choices=("npy", "png8", "png16"), default="npy")
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("show-config", help="print the default run config as JSON")
    p.set_defaults(fn=cmd_show_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        failure = _fail_from(exc)
        message = " ".join(str(failure).split())
        print(f"fewsar-error: {failure.category}: {message}", file=sys.stderr)
        return failure.code


if __name__ == "__main__":
    sys.exit(main())
