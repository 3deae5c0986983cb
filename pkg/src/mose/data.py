"""Synthetic multimodal segmentation datasets with known label distributions.

Two archetypes:

* ``flip``: multi-region scenes; each flippable base class is independently
  relabelled to a twin class with probability p_f, giving 2**F modes whose
  probabilities are an exact product distribution. The image texture of a
  flippable region is a fixed blend of the original and twin palettes, so
  the flip cannot be predicted from the pixels.
* ``blob``: binary task; a blurred blob that graders mark as empty with
  probability q, otherwise as a disc with boundary jitter.

On-disk container (directory)::

    manifest.json            versioned text manifest (spec, seed, mode table,
                             per-split shapes, dtypes and sha256 checksums)
    {split}_images.bin       little-endian float32, shape (n, channels, H, W)
    {split}_labels.bin       uint8 class ids, shape (n, M, H, W)
    {split}_freqs.bin        little-endian float64, shape (n, M)
    {split}_modes.bin        little-endian int32 mode ids, shape (n, M)
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_NAME = "mose-dataset"
FORMAT_VERSION = 1
DEFAULT_FLIP_PROBS = (8 / 17, 7 / 17, 6 / 17, 5 / 17, 4 / 17)


class SpecError(ValueError):
    """Invalid dataset spec; ``field`` names the offending entry."""

    def __init__(self, field: str, msg: str):
        super().__init__(f"{field}: {msg}")
        self.field = field


class FormatError(ValueError):
    pass


@dataclass
class DatasetSpec:
    archetype: str = "flip"
    height: int = 16
    width: int = 16
    channels: int = 3
    base_classes: int = 4
    flip_classes: list[int] = field(default_factory=lambda: [1, 2, 3])
    flip_probs: list[float] = field(default_factory=lambda: list(DEFAULT_FLIP_PROBS[:3]))
    label_mode: str = "enumerate"
    labels_per_image: int = 4
    empty_prob: float = 0.3
    boundary_noise: int = 1
    blob_radius: float = 4.0
    texture_noise: float = 0.1
    n_train: int = 512
    n_val: int = 128
    seed: int = 0
    evaluated_classes: list[int] | None = None

    @property
    def num_flips(self) -> int:
        return len(self.flip_classes) if self.archetype == "flip" else 0

    @property
    def num_classes(self) -> int:
        if self.archetype == "blob":
            return 2
        return self.base_classes + self.num_flips

    def flip_pairs(self) -> list[tuple[int, int]]:
        return [(c, self.base_classes + f) for f, c in enumerate(self.flip_classes)]

    def eval_classes(self) -> list[int]:
        if self.evaluated_classes is not None:
            return list(self.evaluated_classes)
        if self.archetype == "blob":
            return [1]
        return [c for pair in self.flip_pairs() for c in pair]

    def validate(self) -> "DatasetSpec":
        if self.archetype not in ("flip", "blob"):
            raise SpecError("archetype", f"unknown archetype {self.archetype!r}")
        if self.height < 4 or self.width < 4:
            raise SpecError("height", "grid must be at least 4x4")
        if self.channels < 1:
            raise SpecError("channels", "need at least one channel")
        if self.n_train < 0 or self.n_val < 0:
            raise SpecError("n_train", "split sizes must be non-negative")
        if self.label_mode not in ("enumerate", "sample"):
            raise SpecError("label_mode", f"expected 'enumerate' or 'sample', got {self.label_mode!r}")
        if self.labels_per_image < 1:
            raise SpecError("labels_per_image", "must be >= 1")
        if self.archetype == "flip":
            if len(self.flip_probs) != len(self.flip_classes):
                raise SpecError("flip_probs", "needs one probability per flip class")
            for p in self.flip_probs:
                if not 0.0 < p < 1.0:
                    raise SpecError("flip_probs", f"probability {p} outside (0, 1)")
            for c in self.flip_classes:
                if not 1 <= c < self.base_classes:
                    raise SpecError("flip_classes", f"class {c} is not a non-background base class")
            if len(set(self.flip_classes)) != len(self.flip_classes):
                raise SpecError("flip_classes", "duplicate class")
            if self.num_classes > 255:
                raise SpecError("base_classes", "class ids must fit in uint8")
        else:
            if not 0.0 <= self.empty_prob <= 1.0:
                raise SpecError("empty_prob", f"probability {self.empty_prob} outside [0, 1]")
            if self.boundary_noise < 0:
                raise SpecError("boundary_noise", "must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise SpecError(sorted(extra)[0], "unknown spec field")
        return cls(**d)


@dataclass
class Split:
    images: np.ndarray  # float32 (n, channels, H, W)
    labels: np.ndarray  # uint8 (n, M, H, W)
    freqs: np.ndarray  # float64 (n, M)
    modes: np.ndarray  # int32 (n, M)

    def __len__(self):
        return len(self.images)


@dataclass
class Dataset:
    spec: DatasetSpec
    mode_table: list[dict]
    splits: dict[str, Split]

    @property
    def train(self) -> Split:
        return self.splits["train"]

    @property
    def val(self) -> Split:
        return self.splits["val"]

    def mode_probs(self) -> np.ndarray:
        return np.array([m["probability"] for m in self.mode_table])


def flip_mode_table(probs) -> list[dict]:
    """All 2**F flip patterns; mode id = sum of bit_f * 2**f."""
    table = []
    for mode_id in range(2 ** len(probs)):
        bits = [(mode_id >> f) & 1 for f in range(len(probs))]
        p = 1.0
        for b, q in zip(bits, probs):
            p *= q if b else 1.0 - q
        table.append({"id": mode_id, "bits": bits, "probability": p})
    return table


def _palette(n_colors: int, channels: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    return rng.uniform(-1.0, 1.0, size=(n_colors, channels))


def _draw_base(rng, spec: DatasetSpec, min_pixels: int = 4) -> np.ndarray:
    """One shape per non-background class; redrawn until every class keeps ``min_pixels``."""
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(1000):
        base = np.zeros((h, w), dtype=np.uint8)
        for c in range(1, spec.base_classes):
            kind = (c - 1) % 3
            cy, cx = rng.uniform(2, h - 2), rng.uniform(2, w - 2)
            ry, rx = rng.uniform(2.0, h / 3), rng.uniform(2.0, w / 3)
            if kind == 0:
                mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
            elif kind == 1:
                mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            else:
                mask = np.abs(yy - cy) / ry + np.abs(xx - cx) / rx <= 1.0
            base[mask] = c
        counts = np.bincount(base.ravel(), minlength=spec.base_classes)
        if counts[1:].min() >= min_pixels:
            return base
    raise SpecError("height", f"grid too small to show {spec.base_classes - 1} shapes")


def _render(rng, base: np.ndarray, spec: DatasetSpec, palette: np.ndarray) -> np.ndarray:
    colors = palette[: spec.base_classes].copy()
    for c, twin in spec.flip_pairs():
        colors[c] = 0.5 * (palette[c] + palette[twin])
    img = colors[base]  # (H, W, channels)
    img = img + spec.texture_noise * rng.standard_normal(img.shape)
    return np.transpose(img, (2, 0, 1)).astype(np.float32)


def _apply_flips(base: np.ndarray, spec: DatasetSpec, bits) -> np.ndarray:
    label = base.copy()
    for b, (c, twin) in zip(bits, spec.flip_pairs()):
        if b:
            label[base == c] = twin
    return label


def _flip_split(spec: DatasetSpec, n: int, split_id: int, table: list[dict]) -> Split:
    palette = _palette(spec.num_classes, spec.channels, spec.seed)
    probs = np.array([m["probability"] for m in table])
    m = len(table) if spec.label_mode == "enumerate" else spec.labels_per_image
    h, w = spec.height, spec.width
    images = np.zeros((n, spec.channels, h, w), dtype=np.float32)
    labels = np.zeros((n, m, h, w), dtype=np.uint8)
    freqs = np.zeros((n, m))
    modes = np.zeros((n, m), dtype=np.int32)
    for i in range(n):
        rng = np.random.default_rng([spec.seed, split_id, i])
        base = _draw_base(rng, spec)
        images[i] = _render(rng, base, spec, palette)
        if spec.label_mode == "enumerate":
            ids = np.arange(len(table))
            freqs[i] = probs
        else:
            ids = rng.choice(len(table), size=m, p=probs)
            freqs[i] = 1.0 / m
        for j, mid in enumerate(ids):
            labels[i, j] = _apply_flips(base, spec, table[mid]["bits"])
            modes[i, j] = mid
    return Split(images, labels, freqs, modes)


def _disc(h, w, cy, cx, r) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _blob_split(spec: DatasetSpec, n: int, split_id: int) -> Split:
    h, w, m = spec.height, spec.width, spec.labels_per_image
    yy, xx = np.mgrid[0:h, 0:w]
    images = np.zeros((n, spec.channels, h, w), dtype=np.float32)
    labels = np.zeros((n, m, h, w), dtype=np.uint8)
    freqs = np.full((n, m), 1.0 / m)
    modes = np.zeros((n, m), dtype=np.int32)
    r = spec.blob_radius
    for i in range(n):
        rng = np.random.default_rng([spec.seed, split_id, i])
        cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
        intensity = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (r / 1.5) ** 2))
        img = intensity[None] + spec.texture_noise * rng.standard_normal((spec.channels, h, w))
        images[i] = img.astype(np.float32)
        for j in range(m):
            if rng.random() < spec.empty_prob:
                continue
            jitter = rng.integers(-spec.boundary_noise, spec.boundary_noise + 1) if spec.boundary_noise else 0
            labels[i, j] = _disc(h, w, cy, cx, max(r + jitter, 0.5))
            modes[i, j] = 1
    return Split(images, labels, freqs, modes)


def gen_flip_dataset(spec: DatasetSpec, seed: int | None = None) -> Dataset:
    if seed is not None:
        spec = DatasetSpec.from_dict({**spec.to_dict(), "seed": seed})
    spec.validate()
    if spec.archetype != "flip":
        raise SpecError("archetype", "gen_flip_dataset needs archetype 'flip'")
    table = flip_mode_table(spec.flip_probs)
    splits = {"train": _flip_split(spec, spec.n_train, 0, table),
              "val": _flip_split(spec, spec.n_val, 1, table)}
    return Dataset(spec, table, splits)


def gen_blob_dataset(spec: DatasetSpec, seed: int | None = None) -> Dataset:
    if seed is not None:
        spec = DatasetSpec.from_dict({**spec.to_dict(), "seed": seed})
    spec.validate()
    if spec.archetype != "blob":
        raise SpecError("archetype", "gen_blob_dataset needs archetype 'blob'")
    table = [{"id": 0, "bits": [], "probability": spec.empty_prob},
             {"id": 1, "bits": [], "probability": 1.0 - spec.empty_prob}]
    splits = {"train": _blob_split(spec, spec.n_train, 0),
              "val": _blob_split(spec, spec.n_val, 1)}
    return Dataset(spec, table, splits)


def generate(spec: DatasetSpec, seed: int | None = None) -> Dataset:
    if spec.archetype == "blob":
        return gen_blob_dataset(spec, seed)
    return gen_flip_dataset(spec, seed)


def validate_dataset(ds: Dataset) -> None:
    """Reverse-check every label against the declared flip / noise operations."""
    spec = ds.spec
    for name, split in ds.splits.items():
        if not np.allclose(split.freqs.sum(axis=1), 1.0, atol=1e-12):
            raise FormatError(f"{name}: label frequencies do not sum to 1")
        if np.any(split.labels >= spec.num_classes):
            raise FormatError(f"{name}: class id out of range")
        for i in range(len(split)):
            labs = split.labels[i]
            if spec.archetype == "flip":
                # undo all flips to recover the base map; every label must agree
                base = labs[0].copy()
                for c, twin in spec.flip_pairs():
                    base[base == twin] = c
                for j, lab in enumerate(labs):
                    bits = ds.mode_table[split.modes[i, j]]["bits"]
                    if not np.array_equal(_apply_flips(base, spec, bits), lab):
                        raise FormatError(f"{name}[{i}] label {j} unreachable from the base map")
            else:
                for j, lab in enumerate(labs):
                    if split.modes[i, j] == 0:
                        if lab.any():
                            raise FormatError(f"{name}[{i}] label {j}: empty mode with foreground")
                        continue
                    if not lab.any():
                        raise FormatError(f"{name}[{i}] label {j}: blob mode without foreground")
                    ys, xs = np.nonzero(lab)
                    area = len(ys)
                    r_eff = np.sqrt(area / np.pi)
                    if abs(r_eff - spec.blob_radius) > spec.boundary_noise + 1.0:
                        raise FormatError(f"{name}[{i}] label {j}: blob radius outside noise band")


# ----------------------------------------------------------------------------
# container

_PAYLOADS = {
    "images": "<f4",
    "labels": "u1",
    "freqs": "<f8",
    "modes": "<i4",
}


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    splits = {}
    for name, split in ds.splits.items():
        files = {}
        for key, dtype in _PAYLOADS.items():
            arr = np.ascontiguousarray(getattr(split, key), dtype=dtype)
            data = arr.tobytes()
            fname = f"{name}_{key}.bin"
            (path / fname).write_bytes(data)
            files[key] = {"file": fname, "dtype": dtype, "shape": list(arr.shape), "sha256": _sha256(data)}
        splits[name] = {"count": len(split), "labels_per_image": int(split.labels.shape[1]), "files": files}
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "spec": ds.spec.to_dict(),
        "seed": ds.spec.seed,
        "num_classes": ds.spec.num_classes,
        "flip_pairs": [list(p) for p in ds.spec.flip_pairs()],
        "evaluated_classes": ds.spec.eval_classes(),
        "mode_table": ds.mode_table,
        "splits": splits,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"no manifest.json in {path}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt manifest: {e}") from None
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"not a {FORMAT_NAME} container")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {manifest.get('version')}, expected {FORMAT_VERSION}")
    return manifest


def read_dataset(path) -> Dataset:
    path = Path(path)
    manifest = read_manifest(path)
    spec = DatasetSpec.from_dict(manifest["spec"])
    splits = {}
    for name, info in manifest["splits"].items():
        arrays = {}
        for key, meta in info["files"].items():
            data = (path / meta["file"]).read_bytes()
            if _sha256(data) != meta["sha256"]:
                raise FormatError(f"checksum mismatch in {meta['file']}")
            shape = tuple(meta["shape"])
            dtype = np.dtype(meta["dtype"])
            if len(data) != int(np.prod(shape)) * dtype.itemsize:
                raise FormatError(f"payload size mismatch in {meta['file']}")
            arrays[key] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        splits[name] = Split(**arrays)
    return Dataset(spec, manifest["mode_table"], splits)
