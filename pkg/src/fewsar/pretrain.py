"""Stage 1: self-supervised pretraining of the frozen feature extractor.

Two algorithms are provided. The contrastive route trains encoder +
projector so the two views of a chip score high cosine similarity against
each other and low similarity against the other 2N-2 views in the batch
(normalized temperature-scaled cross-entropy). The distillation route
("byol") trains an online encoder/projector/predictor to regress the
projections of a slowly moving EMA target network, with no negatives.

Either way the projector (and predictor) are discarded; only the encoder is
kept and used downstream as a fixed feature extractor.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nets
from .augment import AugmentationConfig, make_view_pair
from .data import DatasetPool
from .errors import (
    ConfigurationError,
    DegenerateBatchError,
    EmptyPoolError,
    NormalizationError,
    ParameterError,
    ShapeError,
)

_STREAM_PRETRAIN = 910
_STREAM_ENCODER_INIT = 911


class Encoder:
    """Convolutional backbone mapping (N, 1, H, W) chips to (N, feat_dim)."""

    def __init__(self, net: nets.Sequential, arch: dict, feat_dim: int):
        self.net = net
        self.arch = dict(arch)
        self.feat_dim = feat_dim

    @property
    def dtype(self):
        return self.net.params()[0].value.dtype

    def forward(self, x, train=False):
        return self.net.forward(x, train)

    def params(self):
        return self.net.params()

    def checksum(self) -> str:
        return nets.parameter_checksum(self.net)


def make_encoder(
    arch: str = "small_conv",
    channels: tuple = (64, 128, 256, 512),
    base_width: int = 8,
    seed: int = 0,
    dtype=np.float32,
) -> Encoder:
    """Build a backbone. ``small_conv`` is the desk-scale default (feature
    dimension = last channel count); ``rn18`` follows the ResNet-18 layout
    at a configurable width (feature dimension = 8 * base_width)."""
    rng = np.random.default_rng(np.random.SeedSequence([_STREAM_ENCODER_INIT, seed]))
    if arch == "small_conv":
        net = nets.build_small_conv(tuple(channels), rng, dtype=dtype)
        feat_dim = int(channels[-1])
        descriptor = {"name": "small_conv", "channels": [int(c) for c in channels]}
    elif arch == "rn18":
        net = nets.build_resnet18(base_width, rng, dtype=dtype)
        feat_dim = 8 * base_width
        descriptor = {"name": "rn18", "base_width": int(base_width)}
    else:
        raise ConfigurationError(f"unknown encoder architecture {arch!r}")
    descriptor["seed"] = int(seed)
    descriptor["dtype"] = np.dtype(dtype).name
    return Encoder(net, descriptor, feat_dim)


def encoder_from_descriptor(arch: dict) -> Encoder:
    name = arch.get("name")
    dtype = np.dtype(arch.get("dtype", "float32"))
    if name == "small_conv":
        return make_encoder(
            "small_conv", channels=tuple(arch["channels"]), seed=arch.get("seed", 0), dtype=dtype
        )
    if name == "rn18":
        return make_encoder(
            "rn18", base_width=arch["base_width"], seed=arch.get("seed", 0), dtype=dtype
        )
    raise ConfigurationError(f"unknown encoder architecture descriptor {arch!r}")


def arch_hash(arch: dict) -> str:
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SSLConfig:
    algorithm: str = "simclr"
    nt_xent_temperature: float = 0.01
    byol_ema_momentum: float = 0.9995
    epochs: int = 200
    batch_size: int = 1024
    learning_rate: float = 3e-4
    weight_decay: float = 1e-4
    lr_schedule: str = "cosine"
    proj_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("simclr", "byol"):
            raise ConfigurationError(f"unknown SSL algorithm {self.algorithm!r}")
        if self.nt_xent_temperature <= 0:
            raise ParameterError("nt_xent_temperature must be > 0")
        if not 0.0 < self.byol_ema_momentum < 1.0:
            raise ParameterError("byol_ema_momentum must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigurationError("epochs >= 1 and batch_size >= 2 required")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ParameterError("learning_rate must be > 0 and weight_decay >= 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.proj_dim < 1:
            raise ParameterError("proj_dim must be >= 1")


# ---------------------------------------------------------------------------
# losses


def nt_xent_loss_and_grad(projections, temperature: float):
    """Contrastive loss over 2N projections ordered [a_1..a_N, b_1..b_N].

    Rows are L2-normalized, pairwise cosine similarities are divided by the
    temperature, and each of the 2N rows plays anchor in a cross-entropy
    that must pick its partner among the other 2N-1 rows. Returns the mean
    loss and its gradient with respect to the (unnormalized) projections.
    """
    z = np.asarray(projections, dtype=np.float64)
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    if z.ndim != 2 or z.shape[0] % 2 != 0:
        raise DegenerateBatchError(f"projections must be a 2N x d matrix, got {z.shape}")
    n2 = z.shape[0]
    n = n2 // 2
    if n < 2:
        raise DegenerateBatchError("need at least 2 positive pairs (4 rows)")
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms < 1e-12):
        raise NormalizationError("zero-norm projection row")
    u = z / norms[:, None]
    sims = (u @ u.T) / temperature
    np.fill_diagonal(sims, -np.inf)
    partner = np.concatenate([np.arange(n) + n, np.arange(n)])

    row_max = sims.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.exp(sims - row_max).sum(axis=1))
    loss = float(np.mean(lse - sims[np.arange(n2), partner]))

    probs = np.exp(sims - lse[:, None])  # exp(-inf) zeroes the diagonal
    grad_s = probs
    grad_s[np.arange(n2), partner] -= 1.0
    grad_s /= n2
    grad_u = ((grad_s + grad_s.T) @ u) / temperature
    grad_z = (grad_u - (grad_u * u).sum(axis=1, keepdims=True) * u) / norms[:, None]
    return loss, grad_z


def nt_xent_loss(projections, temperature: float) -> float:
    loss, _ = nt_xent_loss_and_grad(projections, temperature)
    return loss


def byol_loss_and_grad(predictions, targets):
    """Mean over rows of 2 - 2*cos(prediction, target); targets are fixed."""
    q = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if q.shape != t.shape or q.ndim != 2:
        raise ShapeError(f"prediction/target shape mismatch: {q.shape} vs {t.shape}")
    qn = np.linalg.norm(q, axis=1)
    tn = np.linalg.norm(t, axis=1)
    if np.any(qn < 1e-12) or np.any(tn < 1e-12):
        raise NormalizationError("zero-norm row in distillation loss")
    qh = q / qn[:, None]
    th = t / tn[:, None]
    cos = (qh * th).sum(axis=1)
    loss = float(np.mean(2.0 - 2.0 * cos))
    grad = -2.0 * (th - cos[:, None] * qh) / qn[:, None] / q.shape[0]
    return loss, grad


def byol_loss(predictions, targets) -> float:
    loss, _ = byol_loss_and_grad(predictions, targets)
    return loss


# ---------------------------------------------------------------------------
# training


def make_projector(feat_dim: int, proj_dim: int, rng, dtype=np.float32) -> nets.Sequential:
    """3-layer fully connected projection head, hidden width = feat_dim."""
    return nets.build_mlp([feat_dim, feat_dim, feat_dim, proj_dim], rng, dtype=dtype)


def make_predictor(proj_dim: int, rng, dtype=np.float32) -> nets.Sequential:
    """2-layer prediction head used only by the distillation algorithm."""
    return nets.build_mlp([proj_dim, proj_dim, proj_dim], rng, dtype=dtype)


def _view_batches(pool, aug_cfg, ssl_cfg, order_rng, aug_rng, dtype):
    n = len(pool)
    for epoch in range(ssl_cfg.epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n - ssl_cfg.batch_size + 1, ssl_cfg.batch_size):
            idx = perm[start : start + ssl_cfg.batch_size]
            va, vb = [], []
            for i in idx:
                pair = make_view_pair(pool.chips[i], aug_cfg, aug_rng)
                va.append(pair.view_a.pixels)
                vb.append(pair.view_b.pixels)
            a = np.asarray(va, dtype=dtype)[:, None]
            b = np.asarray(vb, dtype=dtype)[:, None]
            yield epoch, a, b


def _check_pretrain_inputs(pool, ssl_cfg):
    if len(pool) == 0:
        raise EmptyPoolError("pretraining pool is empty")
    if ssl_cfg.batch_size > len(pool):
        raise ConfigurationError(
            f"batch_size {ssl_cfg.batch_size} exceeds pool size {len(pool)}"
        )


def _lr_at(ssl_cfg, step, total):
    if ssl_cfg.lr_schedule == "constant":
        return ssl_cfg.learning_rate
    return nets.cosine_lr(ssl_cfg.learning_rate, step, total)


def pretrain_simclr(
    pool: DatasetPool,
    aug_cfg: AugmentationConfig,
    ssl_cfg: SSLConfig,
    encoder: Encoder | None = None,
):
    """Contrastive pretraining. Labels in the pool, if any, are ignored.

    Returns ``(encoder, log)`` where log holds one record per epoch with the
    mean loss and the learning rate at the epoch's last step.
    """
    _check_pretrain_inputs(pool, ssl_cfg)
    if encoder is None:
        encoder = make_encoder(seed=ssl_cfg.seed)
    dtype = encoder.dtype
    ss = np.random.SeedSequence([_STREAM_PRETRAIN, ssl_cfg.seed])
    init_rng, order_rng, aug_rng = (np.random.default_rng(c) for c in ss.spawn(3))
    projector = make_projector(encoder.feat_dim, ssl_cfg.proj_dim, init_rng, dtype=dtype)

    steps_per_epoch = len(pool) // ssl_cfg.batch_size
    total_steps = steps_per_epoch * ssl_cfg.epochs
    opt = nets.Adam(
        encoder.params() + projector.params(), weight_decay=ssl_cfg.weight_decay
    )

    log = []
    epoch_losses = []
    step = 0
    lr = ssl_cfg.learning_rate
    for epoch, va, vb in _view_batches(pool, aug_cfg, ssl_cfg, order_rng, aug_rng, dtype):
        x = np.concatenate([va, vb], axis=0)
        feats = encoder.forward(x, train=True)
        proj = projector.forward(feats, train=True)
        loss, dproj = nt_xent_loss_and_grad(proj, ssl_cfg.nt_xent_temperature)
        encoder.net.zero_grad()
        projector.zero_grad()
        dfeats = projector.backward(dproj.astype(dtype))
        encoder.net.backward(dfeats)
        lr = _lr_at(ssl_cfg, step, total_steps)
        opt.step(lr)
        step += 1
        epoch_losses.append(loss)
        if step % steps_per_epoch == 0:
            log.append(
                {"epoch": epoch, "mean_loss": float(np.mean(epoch_losses)), "lr": lr}
            )
            epoch_losses = []
    return encoder, log


def pretrain_byol(
    pool: DatasetPool,
    aug_cfg: AugmentationConfig,
    ssl_cfg: SSLConfig,
    encoder: Encoder | None = None,
):
    """Distillation pretraining: online net regresses EMA-target projections.

    The per-step loss is 2 - 2*cos between the normalized online prediction
    and the normalized target projection, symmetrized over the two views;
    target parameters track the online ones with momentum
    ``byol_ema_momentum``. Returns the online encoder and the epoch log.
    """
    _check_pretrain_inputs(pool, ssl_cfg)
    if encoder is None:
        encoder = make_encoder(seed=ssl_cfg.seed)
    dtype = encoder.dtype
    ss = np.random.SeedSequence([_STREAM_PRETRAIN, ssl_cfg.seed, 1])
    init_rng, order_rng, aug_rng = (np.random.default_rng(c) for c in ss.spawn(3))
    projector = make_projector(encoder.feat_dim, ssl_cfg.proj_dim, init_rng, dtype=dtype)
    predictor = make_predictor(ssl_cfg.proj_dim, init_rng, dtype=dtype)
    target_net = encoder.net.clone()
    target_proj = projector.clone()

    steps_per_epoch = len(pool) // ssl_cfg.batch_size
    total_steps = steps_per_epoch * ssl_cfg.epochs
    opt = nets.Adam(
        encoder.params() + projector.params() + predictor.params(),
        weight_decay=ssl_cfg.weight_decay,
    )

    log = []
    epoch_losses = []
    step = 0
    for epoch, va, vb in _view_batches(pool, aug_cfg, ssl_cfg, order_rng, aug_rng, dtype):
        x_online = np.concatenate([va, vb], axis=0)
        x_target = np.concatenate([vb, va], axis=0)
        pred = predictor.forward(
            projector.forward(encoder.forward(x_online, train=True), train=True), train=True
        )
        targets = target_proj.forward(target_net.forward(x_target, train=False), train=False)
        loss, dpred = byol_loss_and_grad(pred, targets)
        encoder.net.zero_grad()
        projector.zero_grad()
        predictor.zero_grad()
        dproj = predictor.backward(dpred.astype(dtype))
        dfeats = projector.backward(dproj)
        encoder.net.backward(dfeats)
        lr = _lr_at(ssl_cfg, step, total_steps)
        opt.step(lr)
        nets.ema_update(target_net, encoder.net, ssl_cfg.byol_ema_momentum)
        nets.ema_update(target_proj, projector, ssl_cfg.byol_ema_momentum)
        step += 1
        epoch_losses.append(loss)
        if step % steps_per_epoch == 0:
            log.append(
                {"epoch": epoch, "mean_loss": float(np.mean(epoch_losses)), "lr": lr}
            )
            epoch_losses = []
    return encoder, log


def pretrain(pool, aug_cfg, ssl_cfg, encoder=None):
    """Dispatch on ``ssl_cfg.algorithm``."""
    if ssl_cfg.algorithm == "byol":
        return pretrain_byol(pool, aug_cfg, ssl_cfg, encoder)
    return pretrain_simclr(pool, aug_cfg, ssl_cfg, encoder)


# ---------------------------------------------------------------------------
# inference and persistence


def extract_features(encoder: Encoder, chips, batch_size: int = 256) -> np.ndarray:
    """Encode chips to an (N, feat_dim) float64 matrix in inference mode.

    Chips must share one shape compatible with the backbone's pooling
    stages. Encoder parameters are never modified.
    """
    if hasattr(chips, "chips"):
        chips = chips.chips
    arrays = [c.pixels if hasattr(c, "pixels") else np.asarray(c) for c in chips]
    if not arrays:
        return np.zeros((0, encoder.feat_dim))
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise ShapeError(f"chips must share one shape, got {sorted(shapes)}")
    x = np.asarray(arrays, dtype=encoder.dtype)[:, None]
    out = []
    for start in range(0, x.shape[0], batch_size):
        out.append(encoder.forward(x[start : start + batch_size], train=False))
    return np.concatenate(out, axis=0).astype(np.float64)


def save_encoder(path, encoder: Encoder, ssl_cfg: SSLConfig | None = None, extra: dict | None = None):
    """Versioned checkpoint: architecture descriptor + parameter arrays."""
    meta = {
        "format_version": 1,
        "arch": encoder.arch,
        "arch_hash": arch_hash(encoder.arch),
        "feat_dim": encoder.feat_dim,
        "ssl_config": asdict(ssl_cfg) if ssl_cfg is not None else None,
        "extra": extra or {},
    }
    arrays = {
        f"state_{i:04d}": arr for i, arr in enumerate(nets.state_arrays(encoder.net))
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    return path


def load_encoder(path):
    """Rebuild an encoder from a checkpoint; returns (encoder, meta)."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint does not exist: {path}")
    with np.load(path) as npz:
        meta = json.loads(bytes(npz["__meta__"]).decode())
        arrays = [npz[k] for k in sorted(k for k in npz.files if k.startswith("state_"))]
    encoder = encoder_from_descriptor(meta["arch"])
    state = nets.state_arrays(encoder.net)
    if len(state) != len(arrays):
        raise ConfigurationError("checkpoint state count mismatch")
    for dst, src in zip(state, arrays):
        if dst.shape != src.shape:
            raise ConfigurationError(
                f"checkpoint shape mismatch: {dst.shape} vs {src.shape}"
            )
        dst[...] = src
    return encoder, meta


def save_training_log(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def load_training_log(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
