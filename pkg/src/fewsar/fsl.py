"""Stage 2: few-shot episodes and classifier training on frozen features.

An episode is one (M-way, N-shot) task: a support set of M*N labeled chips
drawn from the train condition, a query set from the test condition, and
optionally some holdout classes excluded from the label space (used later
as fine-grained OOD probes).

Two head trainers share one engine. The basic trainer minimizes smoothed
cross-entropy on the support set alone. The outlier-exposure trainer adds,
per step, a batch of auxiliary outlier features pushed toward the uniform
prediction 1/M, weighted by ``lambda_oe``; with ``lambda_oe = 0`` it
reproduces the basic trainer's parameter trajectory bit for bit (separate
rng streams feed the support-batch and outlier-batch samplers).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nets
from .augment import stage2_augment
from .data import Chip, DatasetPool
from .errors import (
    ConfigurationError,
    DegenerateBatchError,
    ParameterError,
    SamplingError,
    ShapeError,
)

_STREAM_HEAD = 920
_STREAM_SCRATCH = 921

SCRATCH_ARCHS = {
    "small_conv": (16, 32, 64),
    "deep_conv": (16, 32, 64, 128),
}


@dataclass(frozen=True)
class Episode:
    """One few-shot task instance."""

    M: int
    N: int
    support: tuple  # ((Chip, episode_label), ...) of size M * N
    query: tuple
    class_map: dict  # episode label -> pool class id
    holdout_classes: tuple = ()
    support_indices: tuple = ()
    query_indices: tuple = ()

    def to_descriptor(self) -> dict:
        return {
            "M": self.M,
            "N": self.N,
            "support_indices": list(self.support_indices),
            "query_indices": list(self.query_indices),
            "class_map": {str(k): int(v) for k, v in self.class_map.items()},
            "holdout_classes": list(self.holdout_classes),
        }

    def support_chips(self):
        return [c for c, _ in self.support]

    def support_labels(self):
        return [l for _, l in self.support]

    def query_chips(self):
        return [c for c, _ in self.query]

    def query_labels(self):
        return [l for _, l in self.query]


def episode_from_descriptor(pool: DatasetPool, desc: dict) -> Episode:
    """Rebuild an episode from its serialized index descriptor."""
    class_map = {int(k): int(v) for k, v in desc["class_map"].items()}
    inv = {v: k for k, v in class_map.items()}
    support = tuple(
        (pool.chips[i], inv[pool.labels[i]]) for i in desc["support_indices"]
    )
    query = tuple((pool.chips[i], inv[pool.labels[i]]) for i in desc["query_indices"])
    return Episode(
        M=desc["M"],
        N=desc["N"],
        support=support,
        query=query,
        class_map=class_map,
        holdout_classes=tuple(desc["holdout_classes"]),
        support_indices=tuple(desc["support_indices"]),
        query_indices=tuple(desc["query_indices"]),
    )


def _class_condition_indices(pool, cls, condition):
    """Pool indices of a class, restricted to a condition tag when present."""
    idx = [i for i, l in enumerate(pool.labels) if l == cls]
    if condition is None:
        return idx
    tagged = [i for i in idx if pool.tags[i].get("condition") == condition]
    return tagged if tagged else idx


def sample_episode(
    pool: DatasetPool,
    M: int,
    N: int,
    query_per_class: int | None,
    holdout_count: int,
    rng,
    train_condition: str = "SOC-train",
    query_condition: str = "SOC-test",
) -> Episode:
    """Draw one (M-way, N-shot) episode from a labeled pool.

    ID and holdout classes are drawn without replacement; support comes from
    ``train_condition`` chips, query from ``query_condition`` chips. Pools
    without condition tags fall back to a disjoint support/query split of
    each class. ``query_per_class=None`` takes every available query chip.
    """
    if pool.labels is None:
        raise SamplingError("episode sampling requires a labeled pool")
    if M < 2 or N < 1 or holdout_count < 0:
        raise ParameterError("need M >= 2, N >= 1, holdout_count >= 0")
    classes = sorted(set(pool.labels))
    if len(classes) < M + holdout_count:
        raise SamplingError(
            f"pool has {len(classes)} classes; episode needs {M} ID + {holdout_count} holdout"
        )
    chosen = rng.choice(np.asarray(classes), size=M + holdout_count, replace=False)
    id_classes = [int(c) for c in chosen[:M]]
    holdout = tuple(int(c) for c in chosen[M:])

    support, query, sup_idx, qry_idx = [], [], [], []
    for ep_label, cls in enumerate(id_classes):
        train_idx = _class_condition_indices(pool, cls, train_condition)
        test_idx = _class_condition_indices(pool, cls, query_condition)
        same_source = train_idx == test_idx
        want_q = query_per_class if query_per_class is not None else None
        if same_source:
            if want_q is None:
                raise SamplingError(
                    "query_per_class must be given for pools without condition tags"
                )
            need = N + want_q
            if len(train_idx) < need:
                raise SamplingError(
                    f"class {cls}: {len(train_idx)} chips available, need {need}"
                )
            picked = rng.choice(np.asarray(train_idx), size=need, replace=False)
            s_pick, q_pick = picked[:N], picked[N:]
        else:
            if len(train_idx) < N:
                raise SamplingError(
                    f"class {cls}: {len(train_idx)} '{train_condition}' chips, need {N}"
                )
            s_pick = rng.choice(np.asarray(train_idx), size=N, replace=False)
            if want_q is None:
                q_pick = np.asarray(test_idx)
            else:
                if len(test_idx) < want_q:
                    raise SamplingError(
                        f"class {cls}: {len(test_idx)} '{query_condition}' chips, need {want_q}"
                    )
                q_pick = rng.choice(np.asarray(test_idx), size=want_q, replace=False)
        for i in s_pick:
            support.append((pool.chips[int(i)], ep_label))
            sup_idx.append(int(i))
        for i in q_pick:
            query.append((pool.chips[int(i)], ep_label))
            qry_idx.append(int(i))

    return Episode(
        M=M,
        N=N,
        support=tuple(support),
        query=tuple(query),
        class_map={ep: cls for ep, cls in enumerate(id_classes)},
        holdout_classes=holdout,
        support_indices=tuple(sup_idx),
        query_indices=tuple(qry_idx),
    )


# ---------------------------------------------------------------------------
# classifier head


@dataclass(frozen=True)
class FSLTrainConfig:
    iterations: int = 500
    learning_rate: float = 1e-3
    label_smoothing: float = 0.1
    lambda_oe: float = 0.5
    id_batch_size: int = 64
    oe_batch_size: int = 64
    hidden_dim: int = 256
    stage2_noise_std: float = 0.05
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ParameterError("iterations must be >= 0")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be > 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ParameterError("label_smoothing must lie in [0, 1)")
        if self.lambda_oe < 0:
            raise ParameterError("lambda_oe must be >= 0")
        if self.id_batch_size < 1 or self.oe_batch_size < 1 or self.hidden_dim < 1:
            raise ParameterError("batch sizes and hidden_dim must be >= 1")
        if self.stage2_noise_std < 0:
            raise ParameterError("stage2_noise_std must be >= 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ParameterError("flip_prob must lie in [0, 1]")


def make_smoothed_targets(labels, num_classes: int, smoothing: float) -> np.ndarray:
    """Per-row targets: true class gets 1 - s + s/M, the rest get s/M."""
    labels = np.asarray(labels)
    t = np.full((labels.shape[0], num_classes), smoothing / num_classes, dtype=np.float64)
    t[np.arange(labels.shape[0]), labels] = (1.0 - smoothing) + smoothing / num_classes
    return t


class Classifier:
    """2-layer head over frozen features, with its training mode and the
    detector temperature it should be scored with."""

    def __init__(self, head, num_classes, feat_dim, mode, cfg, loss_trace=None, temperature=100.0):
        self.head = head
        self.num_classes = num_classes
        self.feat_dim = feat_dim
        self.mode = mode
        self.cfg = cfg
        self.loss_trace = loss_trace or []
        self.temperature = temperature

    def predict_logits(self, features) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != self.feat_dim:
            raise ShapeError(f"expected (N, {self.feat_dim}) features, got {f.shape}")
        return self.head.forward(f, train=False)


def _make_head(feat_dim, hidden, num_classes, rng):
    return nets.Sequential(
        [
            nets.Linear(feat_dim, hidden, rng=rng, dtype=np.float64),
            nets.ReLU(),
            nets.Linear(hidden, num_classes, rng=rng, dtype=np.float64),
        ]
    )


def _check_labels(labels):
    labels = np.asarray(labels, dtype=int)
    distinct = np.unique(labels)
    if distinct.size < 2:
        raise DegenerateBatchError("support set covers fewer than 2 classes")
    m = int(labels.max()) + 1
    return labels, m


def _train_head(features, labels, oe_features, lam, cfg, mode, on_step=None):
    feats = np.asarray(features, dtype=np.float64)
    labels, m = _check_labels(labels)
    if feats.ndim != 2 or feats.shape[0] != labels.shape[0]:
        raise ShapeError(f"features {feats.shape} do not match {labels.shape[0]} labels")
    if oe_features is not None:
        oe = np.asarray(oe_features, dtype=np.float64)
        if oe.ndim != 2 or oe.shape[0] == 0:
            raise ConfigurationError("outlier-exposure feature pool is empty")
        if oe.shape[1] != feats.shape[1]:
            raise ShapeError("outlier features must match support feature dimension")

    ss = np.random.SeedSequence([_STREAM_HEAD, cfg.seed])
    init_rng, id_rng, oe_rng = (np.random.default_rng(c) for c in ss.spawn(3))
    head = _make_head(feats.shape[1], cfg.hidden_dim, m, init_rng)
    opt = nets.Adam(head.params())

    n = feats.shape[0]
    full_batch = n <= cfg.id_batch_size
    targets_full = make_smoothed_targets(labels, m, cfg.label_smoothing)
    uniform = np.full((1, m), 1.0 / m)

    trace = []
    for step in range(cfg.iterations):
        if full_batch:
            batch_feats, batch_targets = feats, targets_full
        else:
            idx = id_rng.choice(n, size=cfg.id_batch_size, replace=False)
            batch_feats, batch_targets = feats[idx], targets_full[idx]
        head.zero_grad()
        logits = head.forward(batch_feats, train=True)
        loss_id, dlogits = nets.cross_entropy_soft(logits, batch_targets)
        head.backward(dlogits)
        loss = loss_id
        if oe_features is not None:
            k = min(cfg.oe_batch_size, oe.shape[0])
            oe_idx = oe_rng.choice(oe.shape[0], size=k, replace=False)
            oe_logits = head.forward(oe[oe_idx], train=True)
            loss_oe, dlogits_oe = nets.cross_entropy_soft(
                oe_logits, np.broadcast_to(uniform, oe_logits.shape)
            )
            head.backward(lam * dlogits_oe)
            loss = loss_id + lam * loss_oe
        lr = nets.cosine_lr(cfg.learning_rate, step, cfg.iterations)
        opt.step(lr)
        trace.append(float(loss))
        if on_step is not None:
            on_step(step, head)
    return Classifier(head, m, feats.shape[1], mode, cfg, trace)


def train_classifier_basic(features_support, labels, cfg: FSLTrainConfig, on_step=None) -> Classifier:
    """Minimize smoothed cross-entropy on the support features alone."""
    return _train_head(features_support, labels, None, 0.0, cfg, "basic", on_step)


def train_classifier_oe(
    features_support, labels, features_oe_pool, cfg: FSLTrainConfig, on_step=None
) -> Classifier:
    """Support cross-entropy plus ``lambda_oe`` times the uniform-target
    cross-entropy on outlier-pool features."""
    if features_oe_pool is None:
        raise ConfigurationError("outlier-exposure training requires an OE feature pool")
    return _train_head(
        features_support, labels, features_oe_pool, cfg.lambda_oe, cfg, "oe", on_step
    )


def predict(model, inputs) -> np.ndarray:
    """Logits for a batch; rows follow input order, columns the M classes."""
    return model.predict_logits(inputs)


def save_classifier(path, clf: Classifier, class_map: dict | None = None):
    meta = {
        "format_version": 1,
        "mode": clf.mode,
        "num_classes": clf.num_classes,
        "feat_dim": clf.feat_dim,
        "hidden_dim": clf.cfg.hidden_dim,
        "temperature": clf.temperature,
        "class_map": {str(k): int(v) for k, v in (class_map or {}).items()},
    }
    arrays = {f"state_{i:04d}": p.value for i, p in enumerate(clf.head.params())}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
        **arrays,
    )
    return path


def load_classifier(path):
    with np.load(path) as npz:
        meta = json.loads(bytes(npz["__meta__"]).decode())
        arrays = [npz[k] for k in sorted(k for k in npz.files if k.startswith("state_"))]
    head = _make_head(
        meta["feat_dim"], meta["hidden_dim"], meta["num_classes"], np.random.default_rng(0)
    )
    for p, src in zip(head.params(), arrays):
        p.value[...] = src
    clf = Classifier(
        head,
        meta["num_classes"],
        meta["feat_dim"],
        meta["mode"],
        None,
        temperature=meta["temperature"],
    )
    class_map = {int(k): v for k, v in meta["class_map"].items()}
    return clf, class_map


# ---------------------------------------------------------------------------
# train-from-scratch baselines


class ScratchModel:
    """End-to-end conv classifier trained on raw support chips."""

    def __init__(self, net, num_classes, arch, cfg, loss_trace=None, temperature=100.0):
        self.net = net
        self.num_classes = num_classes
        self.arch = arch
        self.cfg = cfg
        self.loss_trace = loss_trace or []
        self.mode = "scratch"
        self.temperature = temperature

    def predict_logits(self, chips) -> np.ndarray:
        if hasattr(chips, "chips"):
            chips = chips.chips
        arrays = [c.pixels if isinstance(c, Chip) else np.asarray(c) for c in chips]
        x = np.asarray(arrays, dtype=np.float32)[:, None]
        return self.net.forward(x, train=False).astype(np.float64)


def train_scratch_baseline(support, arch: str, cfg: FSLTrainConfig) -> ScratchModel:
    """Supervised training of a full network on the support chips only,
    with noise/flip augmentation applied fresh at every step."""
    if arch not in SCRATCH_ARCHS:
        raise ConfigurationError(
            f"unknown scratch architecture {arch!r}; options: {sorted(SCRATCH_ARCHS)}"
        )
    chips = [c for c, _ in support]
    labels, m = _check_labels([l for _, l in support])

    ss = np.random.SeedSequence([_STREAM_SCRATCH, cfg.seed])
    init_rng, batch_rng, aug_rng = (np.random.default_rng(c) for c in ss.spawn(3))
    channels = SCRATCH_ARCHS[arch]
    backbone = nets.build_small_conv(channels, init_rng)
    clf_layer = nets.Linear(channels[-1], m, rng=init_rng)
    net = nets.Sequential(backbone.layers + [clf_layer])
    opt = nets.Adam(net.params())

    n = len(chips)
    full_batch = n <= cfg.id_batch_size
    targets_full = make_smoothed_targets(labels, m, cfg.label_smoothing)

    trace = []
    for step in range(cfg.iterations):
        idx = (
            np.arange(n)
            if full_batch
            else batch_rng.choice(n, size=cfg.id_batch_size, replace=False)
        )
        batch = [
            stage2_augment(chips[i], cfg.stage2_noise_std, cfg.flip_prob, aug_rng).pixels
            for i in idx
        ]
        x = np.asarray(batch, dtype=np.float32)[:, None]
        net.zero_grad()
        logits = net.forward(x, train=True)
        loss, dlogits = nets.cross_entropy_soft(
            logits.astype(np.float64), targets_full[idx]
        )
        net.backward(dlogits.astype(np.float32))
        opt.step(nets.cosine_lr(cfg.learning_rate, step, cfg.iterations))
        trace.append(float(loss))
    return ScratchModel(net, m, arch, cfg, trace)
