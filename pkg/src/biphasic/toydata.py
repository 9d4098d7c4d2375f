"""Procedural multi-domain "toy face" dataset.

Each identity is an ellipse with eyes and a mouth.  Attributes only touch
pixels inside the ellipse: the fill colour encodes the one-hot colour group,
a smooth tint encodes makeup and a brightness/contrast change encodes
age.  The geometry map holds normalized object coordinates (u, v) inside
the shape and zeros outside; it never depends on the label.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

_SUPERSAMPLE = 4


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    """Visual domains as one-hot attribute groups plus binary flags."""

    groups: tuple[tuple[str, tuple[str, ...]], ...] = (("color", ("black", "blond", "brown")),)
    flags: tuple[str, ...] = ("makeup", "age")

    @property
    def label_size(self) -> int:
        return sum(len(values) for _, values in self.groups) + len(self.flags)

    @property
    def num_domains(self) -> int:
        return math.prod(len(values) for _, values in self.groups) * 2 ** len(self.flags)

    def group_slices(self) -> list[slice]:
        out, start = [], 0
        for _, values in self.groups:
            out.append(slice(start, start + len(values)))
            start += len(values)
        return out

    def flag_indices(self) -> list[int]:
        start = sum(len(values) for _, values in self.groups)
        return list(range(start, start + len(self.flags)))

    def head_sizes(self) -> list[int]:
        return [len(values) for _, values in self.groups] + [1] * len(self.flags)

    def validate(self, label) -> np.ndarray:
        lab = np.asarray(label, dtype=np.float64)
        if lab.shape != (self.label_size,):
            raise LabelError(f"label has {lab.size} entries; {self.describe()} needs {self.label_size}")
        if not np.isin(lab, (0.0, 1.0)).all():
            raise LabelError(f"label entries must be 0 or 1, got {lab.tolist()}")
        for (name, _), sl in zip(self.groups, self.group_slices()):
            if lab[sl].sum() != 1:
                raise LabelError(f"group {name!r} must have exactly one active entry, got {lab[sl].tolist()}")
        return lab

    def validate_batch(self, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.float64)
        if labels.ndim != 2:
            raise LabelError(f"expected a (batch, {self.label_size}) label array, got shape {labels.shape}")
        for row in labels:
            self.validate(row)
        return labels

    def sample_labels(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.zeros((n, self.label_size))
        for (_, values), sl in zip(self.groups, self.group_slices()):
            idx = rng.integers(0, len(values), size=n)
            out[np.arange(n), sl.start + idx] = 1.0
        for i in self.flag_indices():
            out[:, i] = rng.integers(0, 2, size=n)
        return out

    def domain_index(self, label) -> int:
        """Index of the label among all ``num_domains`` combinations."""
        lab = self.validate(label)
        index = 0
        for (_, values), sl in zip(self.groups, self.group_slices()):
            index = index * len(values) + int(np.argmax(lab[sl]))
        for i in self.flag_indices():
            index = index * 2 + int(lab[i])
        return index

    def describe(self) -> str:
        parts = [f"{name}={{{'|'.join(values)}}}" for name, values in self.groups]
        return "DomainSpec(" + ", ".join(parts + list(self.flags)) + ")"

    def to_dict(self) -> dict:
        return {"groups": [[name, list(values)] for name, values in self.groups], "flags": list(self.flags)}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(
            groups=tuple((str(name), tuple(str(v) for v in values)) for name, values in d["groups"]),
            flags=tuple(str(f) for f in d["flags"]),
        )


@dataclass(frozen=True)
class ToyIdentity:
    """Shape parameters, as fractions of the canvas side (offsets: of the axes)."""

    cx: float
    cy: float
    a: float
    b: float
    theta: float
    eye_dx: float
    eye_dy: float
    mouth_dy: float
    mouth_w: float

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "ToyIdentity":
        return cls(
            cx=rng.uniform(0.42, 0.58),
            cy=rng.uniform(0.42, 0.58),
            a=rng.uniform(0.22, 0.34),
            b=rng.uniform(0.28, 0.40),
            theta=rng.uniform(-0.5, 0.5),
            eye_dx=rng.uniform(0.28, 0.58),
            eye_dy=rng.uniform(-0.5, -0.15),
            mouth_dy=rng.uniform(0.28, 0.6),
            mouth_w=rng.uniform(0.2, 0.6),
        )

    def check_visible(self) -> None:
        r = max(self.a, self.b)
        if not (r <= self.cx <= 1 - r and r <= self.cy <= 1 - r):
            raise ValueError(f"identity {self} is not fully inside the canvas")


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    label: np.ndarray  # (L,)
    identity: int
    geometry: np.ndarray  # (2, H, W) in [0, 1]


# Fill colours per value of the first one-hot group; further groups shift the
# hue.  Every fill is brighter than every background in every channel, so an
# attribute change alters contrast magnitude but never its sign.
_PALETTE = np.array([[0.55, 0.55, 0.62], [0.90, 0.82, 0.55], [0.78, 0.58, 0.45]])
_BACKGROUND_LO, _BACKGROUND_HI = 0.06, 0.22
_FEATURE_COLOR = np.array([0.08, 0.06, 0.1])
_AGED_FEATURE_COLOR = np.array([0.34, 0.3, 0.32])
_MAKEUP_TINT = np.array([0.12, -0.1, 0.1])


def _local_coords(ident: ToyIdentity, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c, s = math.cos(ident.theta), math.sin(ident.theta)
    dx, dy = xs - ident.cx, ys - ident.cy
    return (c * dx + s * dy) / ident.a, (-s * dx + c * dy) / ident.b


def _grid(hw: int, factor: int) -> tuple[np.ndarray, np.ndarray]:
    n = hw * factor
    centres = (np.arange(n) + 0.5) / n
    return np.meshgrid(centres, centres, indexing="xy")


def _face_color(label: np.ndarray, spec: DomainSpec) -> np.ndarray:
    color = np.zeros(3)
    for gi, sl in enumerate(spec.group_slices()):
        k = int(np.argmax(label[sl]))
        if gi == 0:
            color = _PALETTE[k % len(_PALETTE)].copy()
        else:
            color = np.clip(color + 0.08 * (k - (sl.stop - sl.start - 1) / 2.0), 0, 1)
    return color


def generate_sample(
    identity: ToyIdentity,
    label,
    hw: int = 32,
    seed: int = 0,
    spec: DomainSpec | None = None,
    identity_id: int = 0,
) -> Sample:
    """Render one sample; a pure function of (identity, label, seed)."""
    spec = spec or DomainSpec()
    lab = spec.validate(label)
    identity.check_visible()
    rng = np.random.default_rng(seed)
    bg_color = rng.uniform(_BACKGROUND_LO, _BACKGROUND_HI, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    strength = rng.uniform(0.02, 0.08)

    xs, ys = _grid(hw, _SUPERSAMPLE)
    u, v = _local_coords(identity, xs, ys)
    r2 = u * u + v * v
    face = (r2 < 1.0).astype(np.float64)
    ramp = (math.cos(angle) * (xs - 0.5) + math.sin(angle) * (ys - 0.5)) * strength
    background = np.clip(bg_color[:, None, None] + ramp[None], 0, 1)

    fill = np.broadcast_to(_face_color(lab, spec)[:, None, None], (3,) + xs.shape).copy()
    flags = {name: lab[i] for name, i in zip(spec.flags, spec.flag_indices())}
    feature_color = _FEATURE_COLOR
    if flags.get("age", 0.0) > 0:
        # desaturate towards the fill's own grey level and fade the features
        fill = 0.45 * fill + 0.55 * fill.mean(axis=0, keepdims=True)
        feature_color = _AGED_FEATURE_COLOR
    if flags.get("makeup", 0.0) > 0:
        # smooth top-to-bottom tint; no new edges
        fill = np.clip(fill + _MAKEUP_TINT[:, None, None] * (0.6 + 0.4 * v)[None], 0, 1)

    ex, ey = identity.eye_dx, identity.eye_dy
    eyes = ((u - ex) ** 2 + ((v - ey) / 0.9) ** 2 < 0.18**2) | ((u + ex) ** 2 + ((v - ey) / 0.9) ** 2 < 0.18**2)
    mouth = (np.abs(u) < identity.mouth_w) & (np.abs(v - identity.mouth_dy) < 0.09)
    features = (eyes | mouth).astype(np.float64)
    inside = fill * (1 - features) + feature_color[:, None, None] * features

    hi_res = background * (1 - face) + inside * face
    image = hi_res.reshape(3, hw, _SUPERSAMPLE, hw, _SUPERSAMPLE).mean(axis=(2, 4))

    pxs, pys = _grid(hw, 1)
    pu, pv = _local_coords(identity, pxs, pys)
    mask = pu * pu + pv * pv < 1.0
    geometry = np.stack([(pu + 1) / 2 * mask, (pv + 1) / 2 * mask])
    return Sample(image=np.clip(image, 0, 1), label=lab, identity=identity_id, geometry=geometry)


@dataclass
class ToyDataset:
    spec: DomainSpec
    images: np.ndarray  # (M, 3, H, W)
    labels: np.ndarray  # (M, L)
    identities: np.ndarray  # (M,) int
    geometry: np.ndarray  # (M, 2, H, W)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.labels[i], int(self.identities[i]), self.geometry[i])

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def subset(self, index) -> "ToyDataset":
        return ToyDataset(self.spec, self.images[index], self.labels[index], self.identities[index], self.geometry[index])


class Splits(NamedTuple):
    train: ToyDataset
    test: ToyDataset
    external: ToyDataset


def _render_split(spec, ids: Sequence[int], per_identity: int, hw: int, seed: int) -> ToyDataset:
    images, labels, idents, geoms = [], [], [], []
    for ident_id in ids:
        ident = ToyIdentity.draw(np.random.default_rng([seed, 0, ident_id]))
        for k in range(per_identity):
            rng = np.random.default_rng([seed, 1, ident_id, k])
            label = spec.sample_labels(rng, 1)[0]
            sample_seed = int(rng.integers(0, 2**31 - 1))
            s = generate_sample(ident, label, hw, sample_seed, spec, ident_id)
            images.append(s.image)
            labels.append(s.label)
            idents.append(ident_id)
            geoms.append(s.geometry)
    return ToyDataset(spec, np.stack(images), np.stack(labels), np.array(idents, dtype=np.int64), np.stack(geoms))


def make_dataset(
    spec: DomainSpec,
    n_identities: int = 200,
    per_identity: int = 10,
    hw: int = 32,
    seed: int = 0,
    n_test_identities: int | None = None,
    n_external_identities: int | None = None,
    external_per_identity: int | None = None,
) -> Splits:
    """Identity-disjoint train/test/external splits.

    ``n_identities`` sizes the train split; the test and external splits
    default to a quarter and a half of it.  Per-sample RNG streams are keyed
    by (seed, identity id, index) so rendering order does not matter.
    """
    n_test = n_identities // 4 if n_test_identities is None else n_test_identities
    n_ext = n_identities // 2 if n_external_identities is None else n_external_identities
    if min(n_identities, n_test, n_ext) < 3:
        raise ValueError(f"each split needs >= 3 identities, got train={n_identities} test={n_test} external={n_ext}")
    if per_identity < 1 or hw < 4:
        raise ValueError(f"degenerate dataset size: per_identity={per_identity}, hw={hw}")
    ids = np.arange(n_identities + n_test + n_ext)
    train = _render_split(spec, ids[:n_identities], per_identity, hw, seed)
    test = _render_split(spec, ids[n_identities : n_identities + n_test], per_identity, hw, seed)
    external = _render_split(spec, ids[n_identities + n_test :], external_per_identity or per_identity, hw, seed)
    return Splits(train, test, external)


def draw_target_labels(spec: DomainSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    return spec.sample_labels(rng, n)


def relabel(sample: Sample, target_label, spec: DomainSpec | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Pair the source image with a target label (never the target rendering)."""
    spec = spec or DomainSpec()
    return sample.image, spec.validate(target_label)


def flip_geometry(geometry: np.ndarray) -> np.ndarray:
    """Mirror a (…, 2, H, W) geometry map horizontally, remapping u -> 1 - u."""
    flipped = geometry[..., ::-1].copy()
    inside = (flipped > 0).any(axis=-3)
    flipped[..., 0, :, :] = np.where(inside, 1.0 - flipped[..., 0, :, :], 0.0)
    return flipped


def augment(
    images: np.ndarray, geometry: np.ndarray, p: float = 0.5, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flip each item horizontally with probability ``p``.

    Returns (images, geometry, flipped mask).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"flip probability must be in [0, 1], got {p}")
    rng = rng or np.random.default_rng()
    flip = rng.random(len(images)) < p
    images = images.copy()
    geometry = geometry.copy()
    if flip.any():
        images[flip] = images[flip][..., ::-1]
        geometry[flip] = flip_geometry(geometry[flip])
    return images, geometry, flip


# -- export / import ----------------------------------------------------------

MANIFEST_COLUMNS = ("filename", "label", "identity", "geometry")


def export_dataset(ds: ToyDataset, directory: str | Path) -> Path:
    """Write PNG images, .npy geometry maps, ``manifest.csv`` and ``domains.json``.

    Manifest columns, in order: filename, label (space-separated 0/1),
    identity id, geometry file.  Pixels are quantized to 8 bits.
    """
    from PIL import Image

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "domains.json").write_text(json.dumps(ds.spec.to_dict(), sort_keys=True) + "\n")
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for i, s in enumerate(ds):
            name, gname = f"img_{i:05d}.png", f"geom_{i:05d}.npy"
            Image.fromarray(to_uint8(s.image)).save(out / name)
            np.save(out / gname, s.geometry)
            writer.writerow([name, " ".join(str(int(x)) for x in s.label), s.identity, gname])
    return out / "manifest.csv"


def import_dataset(directory: str | Path) -> ToyDataset:
    from PIL import Image

    src = Path(directory)
    spec = DomainSpec.from_dict(json.loads((src / "domains.json").read_text()))
    images, labels, idents, geoms = [], [], [], []
    with open(src / "manifest.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != MANIFEST_COLUMNS:
            raise ValueError(f"manifest header {header} != {list(MANIFEST_COLUMNS)}")
        for row in reader:
            name, label, ident, gname = row
            images.append(from_uint8(np.asarray(Image.open(src / name).convert("RGB"))))
            labels.append(spec.validate([float(x) for x in label.split()]))
            idents.append(int(ident))
            geoms.append(np.load(src / gname))
    return ToyDataset(spec, np.stack(images), np.stack(labels), np.array(idents, dtype=np.int64), np.stack(geoms))


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    return np.round(np.clip(image, 0, 1) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64).transpose(2, 0, 1) / 255.0
