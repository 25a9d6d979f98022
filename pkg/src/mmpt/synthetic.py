"""Deterministic synthetic compositional images.

The object index picks a binary shape mask, the attribute index picks the
color/texture painted inside it. Background is flat black, so any attribute
change only moves in-mask statistics. The palette colors all have roughly the
same channel sum, which makes the summed-channel silhouette nearly
color-independent.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .space import Composition, CompositionSpace, space_from_dict

SHAPE_KINDS = ("circle", "square", "triangle", "hbars", "vbars", "ring", "cross", "diamond", "frame", "dot")

_PALETTE = (
    (1.00, 0.25, 0.25),
    (0.25, 1.00, 0.25),
    (0.25, 0.25, 1.00),
    (0.75, 0.75, 0.00),
    (0.75, 0.00, 0.75),
    (0.00, 0.75, 0.75),
    (1.00, 0.50, 0.00),
    (0.50, 0.00, 1.00),
)

BACKGROUND = 0.0
OUTLINE = 0.5
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    size: float  # half-extent as a fraction of the image side


@dataclass(frozen=True)
class AttributeStyle:
    color: tuple[float, float, float]
    stripe_freq: float = 0.0
    noise: float = 0.0


@dataclass(frozen=True)
class RenderSpec:
    image_size: tuple[int, int] = (32, 32)
    channels: int = 3
    object_shapes: tuple[ShapeSpec, ...] = ()
    attribute_styles: tuple[AttributeStyle, ...] = ()
    shift: float = 2.0  # max center shift in pixels
    scale_jitter: float = 0.1  # relative size jitter
    outline: bool = False  # gray attribute-independent rim just outside the mask

    def __post_init__(self):
        if self.shift < 0 or self.scale_jitter < 0:
            raise DatasetError("jitter ranges must be non-negative")
        if self.channels != 3:
            raise DatasetError("only 3-channel rendering is supported")
        for s in self.object_shapes:
            if s.kind not in SHAPE_KINDS:
                raise DatasetError(f"unknown shape kind {s.kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RenderSpec":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        d["object_shapes"] = tuple(ShapeSpec(**s) for s in d.get("object_shapes", ()))
        d["attribute_styles"] = tuple(
            AttributeStyle(tuple(s["color"]), s.get("stripe_freq", 0.0), s.get("noise", 0.0))
            for s in d.get("attribute_styles", ())
        )
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_render_spec(n_attributes: int, n_objects: int, image_size=(32, 32), shift=2.0, scale_jitter=0.1,
                        outline=False):
    shapes = []
    for o in range(n_objects):
        kind = SHAPE_KINDS[o % len(SHAPE_KINDS)]
        size = 0.14 if kind == "dot" else 0.32
        # repeat kinds past the first cycle at a smaller size
        size *= 0.75 ** (o // len(SHAPE_KINDS))
        shapes.append(ShapeSpec(kind, round(size, 4)))
    styles = []
    for a in range(n_attributes):
        color = _PALETTE[a % len(_PALETTE)]
        cycle = a // len(_PALETTE)
        if cycle:
            color = tuple(round(c * 0.6 ** cycle, 4) for c in color)
        styles.append(AttributeStyle(color, stripe_freq=float(a % 3), noise=0.04))
    return RenderSpec(tuple(image_size), 3, tuple(shapes), tuple(styles), shift, scale_jitter, outline)


@dataclass
class ImageSample:
    pixels: np.ndarray  # H x W x C float32
    attribute_idx: int
    object_idx: int
    sample_id: int = 0

    @property
    def composition(self) -> Composition:
        return Composition(self.attribute_idx, self.object_idx)


def shape_mask(kind: str, dy: np.ndarray, dx: np.ndarray, s: float) -> np.ndarray:
    r = np.hypot(dx, dy)
    box = (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if kind == "circle":
        return r <= s
    if kind == "dot":
        return r <= s
    if kind == "square":
        return box
    if kind == "triangle":
        return (dy >= -s) & (dy <= s) & (np.abs(dx) <= (dy + s) / 2)
    if kind == "hbars":
        return box & (np.floor((dy + s) / (s / 2.5)) % 2 == 0)
    if kind == "vbars":
        return box & (np.floor((dx + s) / (s / 2.5)) % 2 == 0)
    if kind == "ring":
        return (r <= s) & (r >= 0.55 * s)
    if kind == "cross":
        return box & ((np.abs(dx) <= s / 3) | (np.abs(dy) <= s / 3))
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= s
    if kind == "frame":
        return box & ~((np.abs(dx) <= 0.55 * s) & (np.abs(dy) <= 0.55 * s))
    raise DatasetError(f"unknown shape kind {kind!r}")


def outline(mask: np.ndarray) -> np.ndarray:
    """One-pixel 8-neighbour dilation of a boolean mask."""
    padded = np.pad(mask, 1)
    h, w = mask.shape
    out = np.zeros_like(mask)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out |= padded[dy:dy + h, dx:dx + w]
    return out


def _check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise DatasetError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def render(spec: RenderSpec, attribute_idx: int, object_idx: int, seed: int) -> ImageSample:
    if not 0 <= attribute_idx < len(spec.attribute_styles):
        raise DatasetError(f"attribute index {attribute_idx} out of range [0, {len(spec.attribute_styles)})")
    if not 0 <= object_idx < len(spec.object_shapes):
        raise DatasetError(f"object index {object_idx} out of range [0, {len(spec.object_shapes)})")
    seed = _check_seed(seed)
    h, w = spec.image_size
    # geometry and texture noise draw from separate streams so the mask never depends on the attribute
    geo = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    tex = np.random.default_rng(np.random.SeedSequence([seed, 1]))

    shape = spec.object_shapes[object_idx]
    cy = (h - 1) / 2 + geo.uniform(-spec.shift, spec.shift)
    cx = (w - 1) / 2 + geo.uniform(-spec.shift, spec.shift)
    s = shape.size * min(h, w) * (1 + geo.uniform(-spec.scale_jitter, spec.scale_jitter))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = shape_mask(shape.kind, yy - cy, xx - cx, s)

    style = spec.attribute_styles[attribute_idx]
    color = np.asarray(style.color, dtype=np.float64)
    shade = 1.0 - 0.35 * (0.5 + 0.5 * np.cos(2 * np.pi * style.stripe_freq * (xx + yy) / (h + w)))
    if style.stripe_freq == 0:
        shade = np.ones_like(shade)
    fill = color[None, None, :] * shade[..., None]
    fill = fill + style.noise * tex.uniform(-1.0, 1.0, size=(h, w, 3))

    pixels = np.full((h, w, 3), BACKGROUND)
    if spec.outline:
        pixels[outline(mask) & ~mask] = OUTLINE
    pixels[mask] = fill[mask]
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
    return ImageSample(pixels, int(attribute_idx), int(object_idx))


@dataclass
class Dataset:
    samples: list
    space: CompositionSpace
    split: str
    spec: RenderSpec | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0,), dtype=np.float32)
        return np.stack([s.pixels for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([[s.attribute_idx, s.object_idx] for s in self.samples], dtype=np.int64).reshape(-1, 2)

    def sample_ids(self) -> list:
        return [s.sample_id for s in self.samples]

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.space, self.split, self.spec, dict(self.meta))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            h.update(np.int64([s.sample_id, s.attribute_idx, s.object_idx]).tobytes())
            h.update(s.pixels.astype("<f4").tobytes())
        return h.hexdigest()[:16]


def sample_seed(seed: int, split: str, c: Composition, index: int) -> int:
    ss = np.random.SeedSequence([_check_seed(seed), SPLIT_CODES[split], c.attribute_idx, c.object_idx, index])
    return int(ss.generate_state(1, np.uint64)[0])


def make_dataset(space: CompositionSpace, spec: RenderSpec, n_per_seen_train: int, n_per_pair_eval: int, seed: int):
    if not space.splits_assigned:
        raise DatasetError("space splits must be assigned before generating data")
    if not space.seen:
        raise DatasetError("the seen split is empty; nothing to train on")
    plan = {
        "train": (sorted(space.seen), n_per_seen_train),
        "val": (sorted(space.seen | space.unseen_val), n_per_pair_eval),
        "test": (sorted(space.seen | space.unseen_test), n_per_pair_eval),
    }
    next_id = 0
    out = []
    for split, (pairs, n) in plan.items():
        samples = []
        for c in pairs:
            for i in range(n):
                sample = render(spec, c.attribute_idx, c.object_idx, sample_seed(seed, split, c, i))
                sample.sample_id = next_id
                next_id += 1
                samples.append(sample)
        out.append(Dataset(samples, space, split, spec, {"seed": int(seed)}))
    return tuple(out)


MANIFEST_FIELDS = ("format", "split", "count", "image_shape", "spec_hash", "space")


def export_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    shape = list(dataset.samples[0].pixels.shape) if dataset.samples else []
    manifest = {
        "format": "mmpt-dataset/1",
        "split": dataset.split,
        "count": len(dataset),
        "image_shape": shape,
        "dtype": "float32-le",
        "spec_hash": dataset.spec.hash() if dataset.spec else None,
        "render_spec": dataset.spec.to_dict() if dataset.spec else None,
        "space": dataset.space.to_dict(),
        "meta": dataset.meta,
        "content_hash": dataset.content_hash(),
    }
    with open(path / "samples.f32", "wb") as f:
        for s in dataset.samples:
            f.write(np.ascontiguousarray(s.pixels, dtype="<f4").tobytes())
    with open(path / "labels.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "attribute", "object"])
        for s in dataset.samples:
            a, o = dataset.space.names_of(s.composition)
            writer.writerow([s.sample_id, a, o])
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def import_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"manifest.json is not valid JSON: {e}") from None
    for key in MANIFEST_FIELDS:
        if key not in manifest:
            raise DatasetError(f"manifest is missing field {key!r}")
    space = space_from_dict(manifest["space"])
    count = manifest["count"]
    shape = tuple(manifest["image_shape"])
    if not isinstance(count, int) or count < 0:
        raise DatasetError(f"manifest field 'count' is invalid: {count!r}")

    with open(path / "labels.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    if len(rows) != count:
        raise DatasetError(f"manifest field 'count' says {count} samples but labels.csv has {len(rows)}")

    raw = (path / "samples.f32").read_bytes()
    per = int(np.prod(shape)) if shape else 0
    expected = count * per * 4
    if len(raw) != expected:
        raise DatasetError(f"samples.f32 is corrupted: expected {expected} bytes, found {len(raw)}")
    pixels = np.frombuffer(raw, dtype="<f4").reshape((count,) + shape) if count else np.zeros((0,), "<f4")

    samples = []
    for i, row in enumerate(rows):
        c = space.lookup(row["attribute"], row["object"])
        samples.append(
            ImageSample(pixels[i].astype(np.float32), c.attribute_idx, c.object_idx, int(row["sample_id"]))
        )
    spec = RenderSpec.from_dict(manifest["render_spec"]) if manifest.get("render_spec") else None
    if spec is not None and spec.hash() != manifest["spec_hash"]:
        raise DatasetError("manifest field 'spec_hash' does not match the stored render spec")
    ds = Dataset(samples, space, manifest["split"], spec, manifest.get("meta", {}))
    if "content_hash" in manifest and ds.content_hash() != manifest["content_hash"]:
        raise DatasetError("manifest field 'content_hash' does not match the payload")
    return ds
