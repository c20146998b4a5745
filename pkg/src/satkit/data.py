"""Datasets, deterministic batching and the on-disk saliency store."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .errors import ChecksumError, ConfigError, MissingArtifactError

# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Annotation:
    """Object location for one image: a half-open pixel box or a boolean mask."""

    kind: str
    bbox: tuple[int, int, int, int] | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "bounding_box":
            if self.bbox is None or self.mask is not None:
                raise ValueError("bounding_box annotation needs bbox and no mask")
            x0, y0, x1, y1 = self.bbox
            if not (x0 < x1 and y0 < y1 and x0 >= 0 and y0 >= 0):
                raise ValueError(f"degenerate bbox {self.bbox}")
        elif self.kind == "segmentation_mask":
            if self.mask is None or self.bbox is not None:
                raise ValueError("segmentation_mask annotation needs mask and no bbox")
            if self.mask.ndim != 2:
                raise ValueError("mask must be [H, W]")
        else:
            raise ValueError(f"unknown annotation kind {self.kind!r}")

    def to_mask(self, height: int, width: int) -> np.ndarray:
        if self.kind == "segmentation_mask":
            if self.mask.shape != (height, width):
                raise ValueError(f"mask shape {self.mask.shape} != {(height, width)}")
            return self.mask.astype(bool)
        x0, y0, x1, y1 = self.bbox
        if x1 > width or y1 > height:
            raise ValueError(f"bbox {self.bbox} outside {width}x{height} image")
        mask = np.zeros((height, width), dtype=bool)
        mask[y0:y1, x0:x1] = True
        return mask


@dataclass
class Dataset:
    name: str
    sample_ids: list[str]
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64 in [0, num_classes)
    num_classes: int
    annotations: dict[str, Annotation] | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError("images must be [N, C, H, W]")
        if len(self.sample_ids) != len(self.images) or len(self.labels) != len(self.images):
            raise ValueError("sample_ids, images and labels differ in length")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("sample ids are not unique")
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values outside [0, 1]")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")
        self._index = {sid: i for i, sid in enumerate(self.sample_ids)}

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def index_of(self, sample_id: str) -> int:
        return self._index[sample_id]

    def subset(self, indices: Sequence[int]) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        ids = [self.sample_ids[i] for i in indices]
        ann = None
        if self.annotations is not None:
            ann = {sid: self.annotations[sid] for sid in ids if sid in self.annotations}
        return Dataset(self.name, ids, self.images[indices], self.labels[indices],
                       self.num_classes, ann)

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.from_numpy(self.images), torch.from_numpy(self.labels)


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------

_LOADERS = {}


def register_loader(name):
    def deco(fn):
        _LOADERS[name] = fn
        return fn
    return deco


def available_datasets() -> list[str]:
    return sorted(_LOADERS)


@register_loader("digits")
def _load_digits(split: str, seed: int):
    """8x8 grayscale handwritten digits (bundled with scikit-learn)."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    images = (bunch.images / 16.0).astype(np.float32)[:, None]
    labels = bunch.target.astype(np.int64)
    # fixed 80/20 split, independent of the sampling seed
    order = np.random.default_rng(0).permutation(len(labels))
    cut = int(0.8 * len(labels))
    idx = np.sort(order[:cut] if split == "train" else order[cut:])
    ids = [f"digits-{i:05d}" for i in idx]
    return ids, images[idx], labels[idx], 10, None


# Synthetic "textured objects" data. Every image carries one rectangular object
# whose colour identifies the class (the large-contrast, robust cue) on a noisy
# background. A faint class-specific texture is spread over the background too:
# it is perfectly predictive but tiny per pixel, so models that lean on it are
# easy to attack.
SYNTH_SIZE = 16
SYNTH_POOL = 2000  # samples per class per split
SYNTH_OBJECT_CONTRAST = 0.12
SYNTH_TEXTURE_AMPLITUDE = 0.008  # about 2/255
SYNTH_NOISE = 0.02
SYNTH_TEXTURE = "stripes"
SYNTH_RANDOM_PHASE = False  # stripes only: shift each sample's grating by a random offset


def _class_palette(k: int) -> np.ndarray:
    rng = np.random.default_rng(12345)
    base = np.eye(3)[np.arange(k) % 3]
    jitter = rng.uniform(-0.3, 0.3, size=(k, 3)) * (np.arange(k) >= 3)[:, None]
    palette = base + jitter
    return palette / np.linalg.norm(palette, axis=1, keepdims=True)


def _grating(c: int, size: int, offset: int = 0) -> np.ndarray:
    # +-1 grating: class c gets orientation c % 4 and period 2 + 2 * (c // 4)
    yy, xx = np.mgrid[0:size, 0:size]
    period = 2 + 2 * (c // 4)
    coord = [yy, xx, yy + xx, yy - xx][c % 4] + offset
    return np.where((coord // (period // 2)) % 2 == 0, 1.0, -1.0)


def _class_textures(k: int, size: int) -> np.ndarray:
    if SYNTH_TEXTURE == "iid":
        rng = np.random.default_rng(54321)
        return rng.choice([-1.0, 1.0], size=(k, 3, size, size))
    return np.stack([np.broadcast_to(_grating(c, size), (3, size, size)) for c in range(k)])


def _synthetic(name: str, split: str, seed: int, num_classes: int, with_boxes: bool):
    size = SYNTH_SIZE
    palette = _class_palette(num_classes)
    textures = _class_textures(num_classes, size)
    # the data seed is fixed per split so that train and test never overlap
    rng = np.random.default_rng([0 if split == "train" else 1, num_classes])
    n = SYNTH_POOL * num_classes
    labels = np.repeat(np.arange(num_classes), SYNTH_POOL)
    images = np.empty((n, 3, size, size), dtype=np.float64)
    annotations = {}
    ids = [f"{name}-{split}-{i:06d}" for i in range(n)]
    for i in range(n):
        c = labels[i]
        img = 0.5 + rng.normal(0.0, SYNTH_NOISE, size=(3, size, size))
        if SYNTH_TEXTURE == "stripes" and SYNTH_RANDOM_PHASE:
            offset = int(rng.integers(0, 2 + 2 * (c // 4)))
            img += SYNTH_TEXTURE_AMPLITUDE * _grating(c, size, offset)[None]
        else:
            img += SYNTH_TEXTURE_AMPLITUDE * textures[c]
        w, h = rng.integers(size // 4, size // 2 + 1, size=2)
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - h + 1))
        img[:, y0:y0 + h, x0:x0 + w] += SYNTH_OBJECT_CONTRAST * (2 * palette[c][:, None, None] - 1)
        images[i] = img
        if with_boxes:
            annotations[ids[i]] = Annotation("bounding_box", bbox=(x0, y0, x0 + int(w), y0 + int(h)))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return ids, images, labels.astype(np.int64), num_classes, annotations if with_boxes else None


@register_loader("synthetic_blobs")
def _load_blobs(split: str, seed: int):
    return _synthetic("synthetic_blobs", split, seed, num_classes=4, with_boxes=True)


@register_loader("synthetic_rgb")
def _load_rgb(split: str, seed: int):
    return _synthetic("synthetic_rgb", split, seed, num_classes=10, with_boxes=False)


def load_dataset(name: str, subset: tuple | None = None, seed: int = 0, *,
                 split: str = "train", classes=None, per_class: int | None = None) -> Dataset:
    """Load a registered dataset, optionally restricted to a class subset.

    ``subset`` is ``(classes, per_class)``; the keyword forms are equivalent.
    ``classes`` may be a list of original class ids or an int ``k`` meaning the
    first ``k`` classes. Kept classes are relabelled densely in the given order.
    ``per_class`` samples are drawn without replacement using ``seed``.
    """
    if name not in _LOADERS:
        raise ConfigError(f"unknown dataset {name!r}; known: {available_datasets()}")
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    if subset is not None:
        classes, per_class = subset
    ids, images, labels, k, annotations = _LOADERS[name](split, seed)

    if classes is None and per_class is None:
        return Dataset(name, list(ids), images, labels, k, annotations)

    if classes is None:
        classes = list(range(k))
    elif isinstance(classes, (int, np.integer)):
        classes = list(range(int(classes)))
    classes = [int(c) for c in classes]
    if len(set(classes)) != len(classes) or any(not 0 <= c < k for c in classes):
        raise ConfigError(f"invalid class list {classes} for {name} with {k} classes")

    rng = np.random.default_rng(seed)
    keep = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        if per_class is not None:
            if per_class > len(members):
                raise ConfigError(
                    f"{name}/{split}: requested {per_class} samples of class {c}, "
                    f"only {len(members)} available")
            members = np.sort(rng.choice(members, size=per_class, replace=False))
        keep.append(members)
    keep = np.concatenate(keep)
    remap = {c: i for i, c in enumerate(classes)}
    new_labels = np.array([remap[int(l)] for l in labels[keep]], dtype=np.int64)
    kept_ids = [ids[i] for i in keep]
    ann = None
    if annotations is not None:
        ann = {sid: annotations[sid] for sid in kept_ids}
    return Dataset(name, kept_ids, images[keep], new_labels, len(classes), ann)


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int | None = 0,
            epoch: int = 0) -> Iterator[tuple[torch.Tensor, torch.Tensor, list[str]]]:
    """Yield ``(images, labels, sample_ids)`` covering every sample once.

    The order depends only on ``(shuffle_seed, epoch)``; ``shuffle_seed=None``
    keeps dataset order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot batch an empty dataset")
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    images = torch.from_numpy(dataset.images)
    labels = torch.from_numpy(dataset.labels)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        t = torch.from_numpy(idx)
        yield images[t], labels[t], [dataset.sample_ids[i] for i in idx]


# ---------------------------------------------------------------------------
# Saliency store
# ---------------------------------------------------------------------------


def _sha256(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


class SaliencyStore:
    """Directory of raw little-endian float32 maps plus a JSON manifest.

    Layout::

        <root>/manifest.json
        <root>/maps/<sample_id>.f32
    """

    MANIFEST = "manifest.json"

    def __init__(self, root: str | os.PathLike, image_shape: Sequence[int] | None = None,
                 sample_ids: Sequence[str] | None = None, metadata: dict | None = None):
        self.root = Path(root)
        self.image_shape = tuple(image_shape) if image_shape is not None else None
        self.entries: dict[str, dict] = {}
        self.expected_ids = list(sample_ids) if sample_ids is not None else None
        self.metadata = dict(metadata or {})

    @classmethod
    def open(cls, root: str | os.PathLike) -> SaliencyStore:
        root = Path(root)
        path = root / cls.MANIFEST
        if not path.exists():
            raise MissingArtifactError(f"no saliency store at {root}")
        manifest = json.loads(path.read_text())
        store = cls(root, manifest.get("image_shape"), manifest.get("expected_ids"),
                    manifest.get("metadata"))
        store.entries = manifest["entries"]
        return store

    @property
    def partial(self) -> bool:
        if self.expected_ids is None:
            return True
        return any(sid not in self.entries for sid in self.expected_ids)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def covers(self, sample_ids: Sequence[str]) -> bool:
        return all(sid in self.entries for sid in sample_ids)

    def _path(self, sample_id: str) -> Path:
        if "/" in sample_id or "\\" in sample_id or sample_id.startswith("."):
            raise ValueError(f"sample id {sample_id!r} is not usable as a file name")
        return self.root / "maps" / f"{sample_id}.f32"

    def put(self, sample_id: str, smap, *, flush: bool = True) -> None:
        values = np.asarray(smap.values, dtype="<f4")
        if self.image_shape is not None and tuple(values.shape) != self.image_shape:
            raise ValueError(f"saliency shape {values.shape} != image shape {self.image_shape}")
        payload = np.ascontiguousarray(values).tobytes(order="C")
        path = self._path(sample_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
        self.entries[sample_id] = {
            "method": smap.method,
            "teacher_id": smap.teacher_id,
            "kind": smap.kind,
            "class_index": int(smap.class_index),
            "dtype": "<f4",
            "shape": list(values.shape),
            "file": f"maps/{sample_id}.f32",
            "sha256": _sha256(payload),
        }
        if flush:
            self.flush()

    def get(self, sample_id: str):
        from .saliency import SaliencyMap

        entry = self.entries.get(sample_id)
        if entry is None:
            raise MissingArtifactError(f"sample {sample_id!r} not in saliency store {self.root}")
        path = self.root / entry["file"]
        if not path.exists():
            raise MissingArtifactError(f"missing payload {path}")
        payload = path.read_bytes()
        if _sha256(payload) != entry["sha256"]:
            raise ChecksumError(f"checksum mismatch for {sample_id!r} in {self.root}")
        shape = tuple(entry["shape"])
        if self.image_shape is not None and shape != self.image_shape:
            raise ValueError(f"stored shape {shape} != image shape {self.image_shape}")
        values = np.frombuffer(payload, dtype=entry["dtype"])
        if values.size != int(np.prod(shape)):
            raise ChecksumError(f"payload size mismatch for {sample_id!r}")
        return SaliencyMap(values.reshape(shape).astype(np.float32), entry["kind"],
                           entry["method"], entry["teacher_id"], entry["class_index"])

    def get_many(self, sample_ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.get(sid).values for sid in sample_ids])

    def flush(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        manifest = {
            "image_shape": list(self.image_shape) if self.image_shape is not None else None,
            "expected_ids": self.expected_ids,
            "partial": self.partial,
            "metadata": self.metadata,
            "entries": self.entries,
        }
        tmp = self.root / (self.MANIFEST + ".tmp")
        tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        tmp.replace(self.root / self.MANIFEST)


def store_saliency(store: SaliencyStore, sample_id: str, smap) -> None:
    store.put(sample_id, smap)


def load_saliency(store: SaliencyStore, sample_id: str):
    return store.get(sample_id)
