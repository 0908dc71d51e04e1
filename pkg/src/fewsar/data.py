"""Chip pools: loading, saving, and procedural synthesis.

A *chip* is a single-channel 2-D image with values in [0, 1]. Pools bundle
chips with optional integer labels and per-chip string tags (condition,
source, uid, ...). Pools are immutable after construction and safe to share
across workers.

Manifest format (JSON Lines, one object per chip)::

    {"path": "chips/00012.npy", "label": 3, "max": 1.0,
     "tag.condition": "SOC-train", "tag.source": "synth"}

``path`` is resolved relative to the manifest file. ``label`` must be a JSON
integer when present. ``max`` optionally declares the raw dynamic range;
otherwise the observed maximum is used. Every other key must be a
``tag.<name>`` entry with a string value. Images may be 2-D ``.npy`` arrays
or 8/16-bit grayscale PNG files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import (
    EmptyPoolError,
    ManifestLoadError,
    ParameterError,
    SchemaError,
)

MIN_CHIP_SIZE = 16  # minimum side for pool-level chips; augmented views may be smaller

_COND_TRAIN = 0
_COND_TEST = 1
_STREAM_TEMPLATE = 900
_STREAM_INSTANCE = 901
_STREAM_SHIFT = 902


@dataclass(frozen=True)
class Chip:
    """Single-channel image with pixel values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ParameterError(f"chip pixels must be 2-D, got shape {px.shape}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise ParameterError(f"chip smaller than 8x8: {px.shape}")
        if not np.isfinite(px).all():
            raise ParameterError("chip contains non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ParameterError(
                f"chip pixels outside [0,1]: min={px.min()}, max={px.max()}"
            )
        px = np.ascontiguousarray(px, dtype=np.float32)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class DatasetPool:
    """A collection of chips with optional labels and per-chip tags."""

    chips: tuple
    labels: tuple | None = None
    tags: tuple = ()
    class_names: tuple | None = None

    def __post_init__(self):
        chips = tuple(self.chips)
        tags = tuple(dict(t) for t in self.tags) if self.tags else tuple({} for _ in chips)
        if len(tags) != len(chips):
            raise ParameterError("tags must have one entry per chip")
        if self.labels is not None:
            labels = tuple(int(l) for l in self.labels)
            if len(labels) != len(chips):
                raise ParameterError("labels length must match chips length")
            if labels and min(labels) < 0:
                raise ParameterError("labels must be non-negative")
            object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "chips", chips)
        object.__setattr__(self, "tags", tags)
        if self.class_names is not None:
            object.__setattr__(self, "class_names", tuple(self.class_names))

    def __len__(self) -> int:
        return len(self.chips)

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            return 0
        if self.class_names is not None:
            return len(self.class_names)
        return max(self.labels) + 1 if self.labels else 0

    def subset(self, indices) -> "DatasetPool":
        idx = list(indices)
        return DatasetPool(
            chips=tuple(self.chips[i] for i in idx),
            labels=tuple(self.labels[i] for i in idx) if self.labels is not None else None,
            tags=tuple(self.tags[i] for i in idx),
            class_names=self.class_names,
        )

    def indices_with_tag(self, key: str, value: str):
        return [i for i, t in enumerate(self.tags) if t.get(key) == value]

    def tag_values(self, key: str):
        return sorted({t[key] for t in self.tags if key in t})

    def pixel_stack(self) -> np.ndarray:
        """Chips stacked as an (N, H, W) array; all chips must share a shape."""
        shapes = {c.pixels.shape for c in self.chips}
        if len(shapes) > 1:
            raise ParameterError(f"pool mixes chip shapes: {sorted(shapes)}")
        return np.stack([c.pixels for c in self.chips])


def merge_pools(*pools: DatasetPool) -> DatasetPool:
    pools = [p for p in pools if len(p)]
    if not pools:
        raise EmptyPoolError("cannot merge zero non-empty pools")
    labeled = [p.labels is not None for p in pools]
    if any(labeled) and not all(labeled):
        raise ParameterError("cannot merge labeled with unlabeled pools")
    names = next((p.class_names for p in pools if p.class_names), None)
    return DatasetPool(
        chips=tuple(c for p in pools for c in p.chips),
        labels=tuple(l for p in pools for l in p.labels) if all(labeled) else None,
        tags=tuple(t for p in pools for t in p.tags),
        class_names=names,
    )


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the procedural chip generator.

    Class identity is a fixed point-scatterer constellation drawn from
    ``template_seed``; instances vary by rotation, translation, and
    multiplicative speckle. ``condition_shift`` > 0 warps the constellation
    and perturbs scatterer amplitudes to emulate a collection-geometry
    change.
    """

    num_classes: int = 10
    chips_per_class: int = 20
    chip_size: int = 32
    scatterer_count_range: tuple = (8, 16)
    speckle_level: float = 0.5
    condition_shift: float = 0.0
    template_seed: int = 0
    background: float = 0.03

    def __post_init__(self):
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        if self.chips_per_class < 1:
            raise ParameterError("chips_per_class must be >= 1")
        if self.chip_size < MIN_CHIP_SIZE:
            raise ParameterError(f"chip_size must be >= {MIN_CHIP_SIZE}")
        lo, hi = self.scatterer_count_range
        if not (1 <= lo <= hi):
            raise ParameterError("scatterer_count_range must be nondecreasing and >= 1")
        if not 0.0 <= self.speckle_level <= 1.0:
            raise ParameterError("speckle_level must lie in [0, 1]")
        if self.condition_shift < 0.0:
            raise ParameterError("condition_shift must be >= 0")


def _class_template(spec: SyntheticSpec, class_id: int):
    # scatterers grouped into a few clusters give each class a distinctive
    # multi-blob silhouette instead of a generic centered cloud
    rng = np.random.default_rng(
        np.random.SeedSequence([_STREAM_TEMPLATE, spec.template_seed, class_id])
    )
    lo, hi = spec.scatterer_count_range
    count = int(rng.integers(lo, hi + 1))
    n_clusters = int(rng.integers(2, 5))
    centers = rng.uniform(-0.30, 0.30, size=(n_clusters, 2))
    assign = rng.integers(0, n_clusters, size=count)
    pos = np.clip(centers[assign] + rng.normal(0.0, 0.045, size=(count, 2)), -0.38, 0.38)
    amp = rng.uniform(0.4, 1.0, size=count)
    return pos, amp


def _splat_scatterers(size, pos_px, amps):
    img = np.zeros((size, size), dtype=np.float64)
    for (py, px), a in zip(pos_px, amps):
        y0, x0 = int(math.floor(py)), int(math.floor(px))
        fy, fx = py - y0, px - x0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                y, x = y0 + dy, x0 + dx
                if 0 <= y < size and 0 <= x < size:
                    img[y, x] += a * wy * wx
    return img


def _render_chip(spec, pos, amp, pose_rng, shift_rng, shift):
    size = spec.chip_size
    theta = pose_rng.uniform(-np.pi / 12, np.pi / 12)
    ty, tx = pose_rng.uniform(-0.05, 0.05, size=2) * size
    speckle = pose_rng.exponential(1.0, size=(size, size))
    bg_noise = pose_rng.uniform(0.5, 1.5)

    positions = pos
    amplitudes = amp
    if shift > 0.0:
        sy = 1.0 + 0.35 * shift * shift_rng.uniform(-1.0, 1.0)
        sx = 1.0 + 0.35 * shift * shift_rng.uniform(-1.0, 1.0)
        shear = 0.35 * shift * shift_rng.uniform(-1.0, 1.0)
        warp = np.array([[sy, shear], [0.0, sx]])
        positions = positions @ warp.T
        amplitudes = amp * (1.0 + 0.6 * shift * shift_rng.uniform(-1.0, 1.0, size=amp.shape))
        amplitudes = np.clip(amplitudes, 0.05, None)

    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    pts = positions @ rot.T
    pos_px = (pts + 0.5) * (size - 1) + np.array([ty, tx])

    img = _splat_scatterers(size, pos_px, amplitudes)
    img = ndimage.gaussian_filter(img, sigma=1.2, mode="constant")
    img = img + spec.background * bg_noise
    img = img * ((1.0 - spec.speckle_level) + spec.speckle_level * speckle)
    peak = img.max()
    if peak > 0:
        img = img / peak
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _instance_rng(seed, class_id, index, cond):
    return np.random.default_rng(
        np.random.SeedSequence([_STREAM_INSTANCE, seed, class_id, index, cond])
    )


def _shift_rng(seed, class_id, index):
    return np.random.default_rng(
        np.random.SeedSequence([_STREAM_SHIFT, seed, class_id, index])
    )


def generate_synthetic_pool(
    spec: SyntheticSpec, seed: int, condition: str | None = None
) -> DatasetPool:
    """Generate a labeled pool of ``num_classes * chips_per_class`` chips.

    Identical ``(spec, seed)`` pairs yield bit-identical pools. When
    ``condition_shift`` > 0 the chips carry tag ``condition: "EOC-test"``
    (the warped-geometry condition); otherwise ``condition`` defaults to
    ``"SOC-train"``.
    """
    if condition is None:
        condition = "EOC-test" if spec.condition_shift > 0 else "SOC-train"
    cond_code = _COND_TEST if condition.endswith("test") else _COND_TRAIN
    chips, labels, tags = [], [], []
    for cls in range(spec.num_classes):
        pos, amp = _class_template(spec, cls)
        for i in range(spec.chips_per_class):
            pose_rng = _instance_rng(seed, cls, i, cond_code)
            shift_rng = _shift_rng(seed, cls, i)
            px = _render_chip(spec, pos, amp, pose_rng, shift_rng, spec.condition_shift)
            chips.append(Chip(px))
            labels.append(cls)
            tags.append(
                {
                    "condition": condition,
                    "source": "synth",
                    "uid": f"synth-{spec.template_seed}-{seed}-{cls}-{i}-{condition}",
                }
            )
    return DatasetPool(chips=tuple(chips), labels=tuple(labels), tags=tuple(tags))


def generate_task_pool(
    spec: SyntheticSpec,
    seed: int,
    train_per_class: int,
    test_per_class: int,
    include_eoc: bool | None = None,
) -> DatasetPool:
    """Build a full evaluation pool with SOC-train / SOC-test / EOC-test tags.

    EOC chips reuse the SOC-test instance parameters and apply the
    ``condition_shift`` warp on top, so a shift of 0 reproduces the SOC-test
    chips pixel for pixel.
    """
    if include_eoc is None:
        include_eoc = spec.condition_shift > 0
    chips, labels, tags = [], [], []
    for cls in range(spec.num_classes):
        pos, amp = _class_template(spec, cls)
        for cond, cond_code, count, shift in (
            ("SOC-train", _COND_TRAIN, train_per_class, 0.0),
            ("SOC-test", _COND_TEST, test_per_class, 0.0),
        ) + (
            (("EOC-test", _COND_TEST, test_per_class, spec.condition_shift),)
            if include_eoc
            else ()
        ):
            for i in range(count):
                pose_rng = _instance_rng(seed, cls, i, cond_code)
                shift_rng = _shift_rng(seed, cls, i)
                px = _render_chip(spec, pos, amp, pose_rng, shift_rng, shift)
                chips.append(Chip(px))
                labels.append(cls)
                tags.append(
                    {
                        "condition": cond,
                        "source": "synth",
                        "uid": f"synth-{spec.template_seed}-{seed}-{cls}-{i}-{cond}",
                    }
                )
    return DatasetPool(chips=tuple(chips), labels=tuple(labels), tags=tuple(tags))


def make_fake_data(n: int, size: int, seed: int) -> DatasetPool:
    """Unlabeled chips of i.i.d. Uniform(0, 1) noise (coarse-grained OOD)."""
    if n < 1:
        raise ParameterError("make_fake_data needs n >= 1")
    if size < MIN_CHIP_SIZE:
        raise ParameterError(f"size must be >= {MIN_CHIP_SIZE}")
    rng = np.random.default_rng(np.random.SeedSequence([903, seed]))
    chips = tuple(
        Chip(rng.random(size=(size, size), dtype=np.float32)) for _ in range(n)
    )
    tags = tuple(
        {"condition": "OOD", "source": "fake", "uid": f"fake-{seed}-{i}"}
        for i in range(n)
    )
    return DatasetPool(chips=chips, labels=None, tags=tags)


# ---------------------------------------------------------------------------
# manifest I/O


def _read_image(path: Path) -> np.ndarray:
    if not path.exists():
        raise ManifestLoadError(f"referenced image file does not exist: {path}")
    try:
        if path.suffix == ".npy":
            arr = np.load(path)
        else:
            with Image.open(path) as im:
                arr = np.asarray(im)
    except ManifestLoadError:
        raise
    except Exception as exc:
        raise ManifestLoadError(f"failed to decode image {path}: {exc}") from exc
    if arr.ndim != 2:
        raise SchemaError(f"image {path} is not single-channel 2-D (shape {arr.shape})")
    return arr.astype(np.float64)


def load_manifest(path) -> DatasetPool:
    """Load a JSONL manifest into a pool, normalizing each chip to [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise ManifestLoadError(f"manifest file does not exist: {path}")
    base = path.parent
    chips, labels, tags = [], [], []
    saw_label = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(rec, dict) or "path" not in rec:
                raise SchemaError(f"{path}:{lineno}: record must be an object with 'path'")
            tag = {}
            label = None
            declared_max = None
            for key, value in rec.items():
                if key == "path":
                    if not isinstance(value, str):
                        raise SchemaError(f"{path}:{lineno}: 'path' must be a string")
                elif key == "label":
                    if isinstance(value, bool) or not isinstance(value, int):
                        raise SchemaError(
                            f"{path}:{lineno}: 'label' must be an integer, got {value!r}"
                        )
                    label = value
                elif key == "max":
                    if not isinstance(value, (int, float)) or isinstance(value, bool):
                        raise SchemaError(f"{path}:{lineno}: 'max' must be a number")
                    declared_max = float(value)
                elif key.startswith("tag."):
                    if not isinstance(value, str):
                        raise SchemaError(
                            f"{path}:{lineno}: tag values must be strings, got {value!r}"
                        )
                    tag[key[4:]] = value
                else:
                    raise SchemaError(f"{path}:{lineno}: unknown field {key!r}")
            raw = _read_image((base / rec["path"]).resolve())
            peak = declared_max if declared_max is not None else float(raw.max())
            if peak > 0:
                raw = raw / peak
            if "path" not in tag:
                tag["path"] = rec["path"]
            chips.append(Chip(np.clip(raw, 0.0, 1.0).astype(np.float32)))
            tags.append(tag)
            labels.append(label)
            saw_label += label is not None
    if not chips:
        raise EmptyPoolError(f"manifest {path} contains no records")
    if saw_label and saw_label != len(chips):
        raise SchemaError(f"{path}: 'label' present on some records but not all")
    if any(l is not None and l < 0 for l in labels):
        raise SchemaError(f"{path}: negative labels are not allowed")
    return DatasetPool(
        chips=tuple(chips),
        labels=tuple(labels) if saw_label else None,
        tags=tuple(tags),
    )


def save_manifest(pool: DatasetPool, out_dir, image_format: str = "npy") -> Path:
    """Write a pool as images plus a manifest; inverse of :func:`load_manifest`.

    ``npy`` stores float32 pixels exactly; ``png8`` / ``png16`` quantize to
    the integer grid, so a reload agrees within one quantization step.
    """
    if image_format not in ("npy", "png8", "png16"):
        raise ParameterError(f"unsupported image format {image_format!r}")
    if len(pool) == 0:
        raise EmptyPoolError("refusing to save an empty pool")
    out_dir = Path(out_dir)
    chip_dir = out_dir / "chips"
    chip_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, chip in enumerate(pool.chips):
        if image_format == "npy":
            rel = f"chips/{i:05d}.npy"
            np.save(out_dir / rel, chip.pixels)
            declared = 1.0
        elif image_format == "png8":
            rel = f"chips/{i:05d}.png"
            Image.fromarray(
                np.round(chip.pixels * 255.0).astype(np.uint8), mode="L"
            ).save(out_dir / rel)
            declared = 255
        else:
            rel = f"chips/{i:05d}.png"
            Image.fromarray(np.round(chip.pixels * 65535.0).astype(np.uint16)).save(
                out_dir / rel
            )
            declared = 65535
        rec = {"path": rel, "max": declared}
        if pool.labels is not None:
            rec["label"] = int(pool.labels[i])
        for k, v in sorted(pool.tags[i].items()):
            if k != "path":
                rec[f"tag.{k}"] = str(v)
        records.append(rec)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def chip_identity(pool: DatasetPool, index: int) -> str:
    """Stable identity string for overlap checks (uid tag, else path tag)."""
    tag = pool.tags[index]
    return tag.get("uid") or tag.get("path") or f"anon-{id(pool)}-{index}"
