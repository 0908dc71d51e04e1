"""Multi-run experiment orchestration: accuracy tables, OOD AUROC tables,
and score-density exports.

Every run derives its seeds from (master_seed, run_index), so results are
independent of execution order and replay bit-exactly; the same run index
draws the same episode for every method, which makes method comparisons
paired. Aggregation reports the mean and a normal-approximation 95%
confidence halfwidth (1.96 * stdev / sqrt(runs)).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import DatasetPool, chip_identity
from .errors import MetricError, ParameterError, ProtocolViolationError, SamplingError
from .fsl import (
    FSLTrainConfig,
    sample_episode,
    train_classifier_basic,
    train_classifier_oe,
    train_scratch_baseline,
)
from .ood import DetectorConfig, ScoreSet, auroc, msp_scores, tpr_threshold
from .pretrain import Encoder, extract_features

_STREAM_EPISODE = 931
_STREAM_HEAD_SEED = 932
_STREAM_OOD_EPISODE = 933
_STREAM_OOD_HEAD = 934

SSL_METHODS = ("ssl-basic", "ssl-oe")
SCRATCH_METHODS = ("scratch-small", "scratch-deep")
METHOD_LABELS = {
    "scratch-small": "Scratch-SmallConv",
    "scratch-deep": "Scratch-DeepConv",
    "ssl-basic": "SSL+basic",
    "ssl-oe": "SSL+OE",
}


@dataclass(frozen=True)
class AccuracySummary:
    M: int
    N: int
    method: str
    mean_accuracy: float
    ci95_halfwidth: float
    num_runs: int


@dataclass(frozen=True)
class OODReport:
    auroc_by_set: dict  # set name -> {"basic": %, "oe": %}
    ways: int
    shots: int
    num_runs: int


def mean_ci95(values):
    """Mean and 1.96 * stdev / sqrt(n); a single value has zero halfwidth."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise MetricError("cannot aggregate zero runs")
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(1.96 * arr.std(ddof=1) / math.sqrt(arr.size))


def _derived_seed(stream, master_seed, run_idx):
    return int(np.random.SeedSequence([stream, master_seed, run_idx]).generate_state(1)[0])


def _run_rng(stream, master_seed, run_idx):
    return np.random.default_rng(np.random.SeedSequence([stream, master_seed, run_idx]))


def _map_runs(fn, payloads, workers):
    if workers <= 1:
        return [fn(p) for p in payloads]
    chunk = max(1, math.ceil(len(payloads) / workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, payloads, chunksize=chunk))


# ---------------------------------------------------------------------------
# accuracy experiments


def _accuracy_single_run(payload):
    (
        model,
        pool,
        M,
        N,
        query_per_class,
        train_condition,
        query_condition,
        mode,
        oe_features,
        fsl_cfg,
        master_seed,
        run_idx,
    ) = payload
    rng = _run_rng(_STREAM_EPISODE, master_seed, run_idx)
    episode = sample_episode(
        pool,
        M,
        N,
        query_per_class,
        0,
        rng,
        train_condition=train_condition,
        query_condition=query_condition,
    )
    cfg_run = replace(fsl_cfg, seed=_derived_seed(_STREAM_HEAD_SEED, master_seed, run_idx))
    labels = np.asarray(episode.query_labels())
    if isinstance(model, str):
        trained = train_scratch_baseline(episode.support, model, cfg_run)
        logits = trained.predict_logits(episode.query_chips())
    else:
        feats_sup = extract_features(model, episode.support_chips())
        feats_qry = extract_features(model, episode.query_chips())
        if mode == "oe":
            clf = train_classifier_oe(feats_sup, episode.support_labels(), oe_features, cfg_run)
        else:
            clf = train_classifier_basic(feats_sup, episode.support_labels(), cfg_run)
        logits = clf.predict_logits(feats_qry)
    return 100.0 * float((logits.argmax(axis=1) == labels).mean())


def accuracy_runs(
    model,
    pool: DatasetPool,
    M: int,
    N: int,
    num_runs: int,
    mode: str = "basic",
    fsl_cfg: FSLTrainConfig | None = None,
    oe_features=None,
    master_seed: int = 0,
    query_per_class: int | None = 10,
    train_condition: str = "SOC-train",
    query_condition: str = "SOC-test",
    workers: int = 1,
):
    """Per-run query accuracies (percent), one entry per run index."""
    if num_runs < 1:
        raise ParameterError("num_runs must be >= 1")
    if isinstance(model, str) and mode != "basic":
        raise ParameterError("scratch baselines only support basic training")
    if mode == "oe" and oe_features is None:
        raise ParameterError("mode 'oe' requires oe_features")
    if mode not in ("basic", "oe"):
        raise ParameterError(f"unknown training mode {mode!r}")
    fsl_cfg = fsl_cfg or FSLTrainConfig()
    payloads = [
        (
            model,
            pool,
            M,
            N,
            query_per_class,
            train_condition,
            query_condition,
            mode,
            oe_features,
            fsl_cfg,
            master_seed,
            r,
        )
        for r in range(num_runs)
    ]
    try:
        return _map_runs(_accuracy_single_run, payloads, workers)
    except SamplingError as exc:
        raise SamplingError(f"accuracy experiment failed: {exc}") from exc


def run_accuracy_experiment(model, pool, M, N, num_runs, mode="basic", **kwargs) -> AccuracySummary:
    """Episode-train-evaluate loop aggregated to mean accuracy with 95% CI."""
    accs = accuracy_runs(model, pool, M, N, num_runs, mode, **kwargs)
    mean, ci = mean_ci95(accs)
    method = model if isinstance(model, str) else f"ssl-{mode}"
    return AccuracySummary(
        M=M, N=N, method=method, mean_accuracy=mean, ci95_halfwidth=ci, num_runs=num_runs
    )


def run_eoc_experiment(model, pool, M, N, num_runs, mode="basic", **kwargs) -> AccuracySummary:
    """Accuracy with the query set drawn from the shifted-geometry chips."""
    kwargs.setdefault("query_condition", "EOC-test")
    return run_accuracy_experiment(model, pool, M, N, num_runs, mode, **kwargs)


# ---------------------------------------------------------------------------
# OOD experiments


def _balanced_sample(stack, count, rng):
    if stack.shape[0] <= count:
        return stack
    idx = rng.choice(stack.shape[0], size=count, replace=False)
    return stack[idx]


def _ood_single_run(payload):
    (
        encoder,
        pool,
        ood_stacks,
        M,
        N,
        query_per_class,
        holdout_count,
        fsl_cfg,
        oe_features,
        temperature,
        eoc_by_class,
        master_seed,
        run_idx,
    ) = payload
    rng = _run_rng(_STREAM_OOD_EPISODE, master_seed, run_idx)
    episode = sample_episode(pool, M, N, query_per_class, holdout_count, rng)
    cfg_run = replace(fsl_cfg, seed=_derived_seed(_STREAM_OOD_HEAD, master_seed, run_idx))

    feats_sup = extract_features(encoder, episode.support_chips())
    labels_sup = episode.support_labels()
    basic = train_classifier_basic(feats_sup, labels_sup, cfg_run)
    oe = train_classifier_oe(feats_sup, labels_sup, oe_features, cfg_run)

    feats_id = extract_features(encoder, episode.query_chips())
    id_scores = {
        "basic": msp_scores(basic.predict_logits(feats_id), temperature),
        "oe": msp_scores(oe.predict_logits(feats_id), temperature),
    }
    budget = feats_id.shape[0]

    probes = {}
    if holdout_count > 0:
        holdout_idx = [
            i
            for i, l in enumerate(pool.labels)
            if l in episode.holdout_classes
            and pool.tags[i].get("condition") in (None, "SOC-test")
        ]
        hold_stack = np.stack([pool.chips[i].pixels for i in holdout_idx])
        probes["Holdout"] = _balanced_sample(hold_stack, budget, rng)
    for name in sorted(ood_stacks):
        probes[name] = _balanced_sample(ood_stacks[name], budget, rng)

    result = {"run": run_idx, "auroc": {}, "scores": {}}
    for name, stack in probes.items():
        feats = extract_features(encoder, stack)
        per_mode = {}
        for mode, clf in (("basic", basic), ("oe", oe)):
            s = msp_scores(clf.predict_logits(feats), temperature)
            per_mode[mode] = auroc(id_scores[mode], s)
            if name == "Holdout":
                result["scores"].setdefault(f"Holdout-OOD::{mode}", []).extend(s.tolist())
            else:
                result["scores"].setdefault(f"{name}-OOD::{mode}", []).extend(s.tolist())
        result["auroc"][name] = per_mode
    for mode in ("basic", "oe"):
        result["scores"][f"SOC-ID::{mode}"] = id_scores[mode].tolist()

    if eoc_by_class is not None:
        eoc_chips = [
            px for cls in episode.class_map.values() for px in eoc_by_class.get(cls, [])
        ]
        if eoc_chips:
            stack = _balanced_sample(np.stack(eoc_chips), budget, rng)
            feats = extract_features(encoder, stack)
            for mode, clf in (("basic", basic), ("oe", oe)):
                s = msp_scores(clf.predict_logits(feats), temperature)
                result["scores"][f"EOC-ID::{mode}"] = s.tolist()
    return result


def check_oe_ood_disjoint(oe_pool: DatasetPool, ood_sets: dict):
    """Raise when any OOD set shares a chip identity with the OE pool."""
    oe_ids = {chip_identity(oe_pool, i) for i in range(len(oe_pool))}
    for name, ood_pool in ood_sets.items():
        shared = [
            chip_identity(ood_pool, i)
            for i in range(len(ood_pool))
            if chip_identity(ood_pool, i) in oe_ids
        ]
        if shared:
            raise ProtocolViolationError(
                f"OOD set {name!r} overlaps the OE pool on {len(shared)} chips "
                f"(first: {shared[0]})"
            )


def run_ood_experiment(
    encoder: Encoder,
    pool: DatasetPool,
    ood_sets: dict,
    M: int,
    N: int,
    num_runs: int,
    detector_cfg: DetectorConfig | None = None,
    fsl_cfg: FSLTrainConfig | None = None,
    oe_pool: DatasetPool | None = None,
    oe_features=None,
    master_seed: int = 0,
    holdout_count: int | None = None,
    query_per_class: int | None = 10,
    include_eoc_scores: bool = False,
    workers: int = 1,
    score_mode: str = "oe",
):
    """Paired basic/OE detection evaluation over episodes.

    Each run trains both heads on the identical episode (same support
    indices and initialization seed), scores the ID query chips and every
    OOD probe set with the temperature-scaled MSP detector, and records per
    set and per mode the AUROC. Returns ``(OODReport, records, score_sets)``
    where score_sets pool the ``score_mode`` head's scores across runs.
    """
    detector_cfg = detector_cfg or DetectorConfig()
    fsl_cfg = fsl_cfg or FSLTrainConfig()
    num_classes = len(set(pool.labels or ()))
    if holdout_count is None:
        holdout_count = max(0, num_classes - M)
    if oe_pool is not None:
        check_oe_ood_disjoint(oe_pool, ood_sets)
        if oe_features is None:
            oe_features = extract_features(encoder, oe_pool)
    if oe_features is None:
        raise ParameterError("run_ood_experiment needs oe_pool or oe_features")

    ood_stacks = {name: p.pixel_stack() for name, p in ood_sets.items()}
    eoc_by_class = None
    if include_eoc_scores:
        eoc_by_class = {}
        for i, tag in enumerate(pool.tags):
            if tag.get("condition") == "EOC-test":
                eoc_by_class.setdefault(pool.labels[i], []).append(pool.chips[i].pixels)
        if not eoc_by_class:
            eoc_by_class = None

    payloads = [
        (
            encoder,
            pool,
            ood_stacks,
            M,
            N,
            query_per_class,
            holdout_count,
            fsl_cfg,
            oe_features,
            detector_cfg.temperature,
            eoc_by_class,
            master_seed,
            r,
        )
        for r in range(num_runs)
    ]
    results = _map_runs(_ood_single_run, payloads, workers)

    set_names = sorted({name for res in results for name in res["auroc"]})
    auroc_by_set = {}
    for name in set_names:
        auroc_by_set[name] = {
            mode: mean_ci95([res["auroc"][name][mode] for res in results])[0]
            for mode in ("basic", "oe")
        }
    report = OODReport(auroc_by_set=auroc_by_set, ways=M, shots=N, num_runs=num_runs)

    pooled: dict = {}
    for res in results:
        for key, vals in res["scores"].items():
            group, mode = key.split("::")
            if mode == score_mode:
                pooled.setdefault(group, []).extend(vals)
    score_sets = [ScoreSet(scores=tuple(v), group=g) for g, v in sorted(pooled.items())]
    records = [
        {"run": res["run"], "set": name, "basic": res["auroc"][name]["basic"], "oe": res["auroc"][name]["oe"]}
        for res in results
        for name in sorted(res["auroc"])
    ]
    return report, records, score_sets


# ---------------------------------------------------------------------------
# densities and tables


def export_score_densities(score_sets, bins: int, m_ways: int, tpr_targets=(0.8,)):
    """Normalized histograms over a shared [1/M, 1] grid, plus threshold
    markers computed from each ID-named group at the requested TPR targets."""
    if not score_sets:
        raise MetricError("no score sets to export")
    if bins < 1:
        raise ParameterError("bins must be >= 1")
    lo = 1.0 / m_ways
    edges = np.linspace(lo, 1.0, bins + 1)
    densities = {}
    for ss in score_sets:
        scores = np.clip(np.asarray(ss.scores, dtype=np.float64), lo, 1.0)
        if scores.size == 0:
            raise MetricError(f"score set {ss.group!r} is empty")
        hist, _ = np.histogram(scores, bins=edges, density=True)
        densities[ss.group] = hist
    markers = {}
    for ss in score_sets:
        if "ID" in ss.group and "OOD" not in ss.group:
            markers[ss.group] = {
                float(t): tpr_threshold(ss.scores, t) for t in tpr_targets
            }
    return {"edges": edges, "densities": densities, "markers": markers}


def density_table_rows(export) -> list:
    """Flatten a density export to line-delimited-record dictionaries."""
    edges = export["edges"]
    rows = []
    for group in sorted(export["densities"]):
        dens = export["densities"][group]
        for i in range(len(dens)):
            rows.append(
                {
                    "type": "bin",
                    "group": group,
                    "bin_lo": float(edges[i]),
                    "bin_hi": float(edges[i + 1]),
                    "density": float(dens[i]),
                }
            )
    for group in sorted(export["markers"]):
        for t, beta in sorted(export["markers"][group].items()):
            rows.append(
                {"type": "marker", "group": group, "tpr": float(t), "beta": float(beta)}
            )
    return rows


def render_accuracy_table(summaries, ways_list, shots_list) -> str:
    """Methods x (ways, shots) grid of mean +/- CI cells, as fixed-width text."""
    methods = []
    for s in summaries:
        if s.method not in methods:
            methods.append(s.method)
    by_key = {(s.method, s.M, s.N): s for s in summaries}
    cols = [(m, n) for m in ways_list for n in shots_list]
    header = ["method".ljust(18)] + [f"{m}way-{n}shot".rjust(14) for m, n in cols]
    lines = ["  ".join(header)]
    for method in methods:
        label = METHOD_LABELS.get(method, method)
        cells = [label.ljust(18)]
        for m, n in cols:
            s = by_key.get((method, m, n))
            cells.append(
                (f"{s.mean_accuracy:.1f}±{s.ci95_halfwidth:.1f}" if s else "-").rjust(14)
            )
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def render_ood_table(report: OODReport) -> str:
    lines = [
        f"{report.ways}-way {report.shots}-shot, {report.num_runs} runs (% AUROC, basic / OE)"
    ]
    for name in sorted(report.auroc_by_set):
        val = report.auroc_by_set[name]
        lines.append(f"{name.ljust(20)}  {val['basic']:5.1f} / {val['oe']:5.1f}")
    return "\n".join(lines) + "\n"
