"""Synthetic segmentation scenes, train/hold-out splits, and file formats.

A scene is a background (class 0) with one to three rectangles or discs of
foreground classes. Feature channels are a box-blurred one-hot map of the
mask plus Gaussian noise, followed by two normalized coordinate channels,
so F = C + 2. The blur makes pixels along shape borders ambiguous.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ParseError
from .metrics import LabelMask, one_hot_stack
from .seeding import substream

FEAT_MAGIC = b"ASLF"
HOLDOUT_FRACTION = 0.25


@dataclass(frozen=True)
class SceneParams:
    size_px: int = 16
    num_classes: int = 3
    imbalance: float = 0.1
    noise: float = 0.4
    blur: bool = True

    def __post_init__(self):
        if self.size_px < 8:
            raise ConfigError(f"scene size must be >= 8, got {self.size_px}")
        if not 2 <= self.num_classes <= 5:
            raise ConfigError(f"num_classes must be in [2, 5], got {self.num_classes}")
        if not 0.0 <= self.imbalance <= 0.9:
            raise ConfigError(f"imbalance must be in [0, 0.9], got {self.imbalance}")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")

    @property
    def num_features(self) -> int:
        return self.num_classes + 2


@dataclass(frozen=True, eq=False)
class Scene:
    features: np.ndarray  # (H, W, F)
    mask: LabelMask


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    train: list
    hold_out: list
    seed: int
    params: SceneParams = SceneParams()
    train_ids: tuple = ()
    hold_out_ids: tuple = ()

    @staticmethod
    def stack(scenes):
        x = np.stack([s.features for s in scenes])
        y = np.stack([s.mask.labels for s in scenes])
        return x, y

    def arrays(self, which: str = "train"):
        """(features, labels) arrays for 'train', 'holdout' or 'all'."""
        if which == "train":
            return self.stack(self.train)
        if which == "holdout":
            return self.stack(self.hold_out)
        if which == "all":
            return self.stack(self.train + self.hold_out)
        raise ConfigError(f"unknown split {which!r}")


def _box_blur(x):
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    return sliding_window_view(xp, (3, 3), axis=(0, 1)).mean(axis=(-2, -1))


def gen_scene(seed: int, size_px: int = 16, num_classes: int = 3, imbalance: float = 0.1,
              noise: float = 0.4, blur: bool = True, index: int | None = None) -> Scene:
    p = SceneParams(size_px, num_classes, imbalance, noise, blur)
    rng = substream(seed, "scene") if index is None else substream(seed, "scene", index)
    S = p.size_px
    labels = np.zeros((S, S), dtype=np.int64)
    n_shapes = int(rng.integers(1, 4))
    target = p.imbalance * S * S
    if target > 0:
        shares = rng.uniform(0.7, 1.3, n_shapes)
        areas = target * shares / shares.sum()
        ii, jj = np.mgrid[0:S, 0:S]
        for area in areas:
            cls = int(rng.integers(1, p.num_classes))
            if rng.random() < 0.5:
                aspect = rng.uniform(0.5, 2.0)
                h = int(np.clip(round(np.sqrt(area * aspect)), 1, S))
                w = int(np.clip(round(area / h), 1, S))
                top = int(rng.integers(0, S - h + 1))
                left = int(rng.integers(0, S - w + 1))
                labels[top:top + h, left:left + w] = cls
            else:
                r = np.sqrt(area / np.pi)
                lo, hi = r, S - 1 - r
                ci = rng.uniform(lo, hi) if hi > lo else (S - 1) / 2
                cj = rng.uniform(lo, hi) if hi > lo else (S - 1) / 2
                labels[(ii - ci) ** 2 + (jj - cj) ** 2 <= r * r] = cls
    ind = one_hot_stack(labels, p.num_classes)
    if p.blur:
        ind = _box_blur(ind)
    ind = ind + p.noise * rng.standard_normal(ind.shape)
    coords = np.linspace(-1.0, 1.0, S)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    feats = np.concatenate([ind, yy[..., None], xx[..., None]], axis=-1)
    return Scene(feats, LabelMask(labels, p.num_classes))


def gen_dataset(seed: int, count: int, params: SceneParams = SceneParams()) -> DatasetSplit:
    if count < 4:
        raise ConfigError(f"dataset needs at least 4 scenes, got {count}")
    scenes = [gen_scene(seed, params.size_px, params.num_classes, params.imbalance,
                        params.noise, params.blur, index=i) for i in range(count)]
    order = substream(seed, "split").permutation(count)
    n_hold = max(1, int(round(count * HOLDOUT_FRACTION)))
    hold_ids = tuple(sorted(int(i) for i in order[:n_hold]))
    train_ids = tuple(sorted(int(i) for i in order[n_hold:]))
    return DatasetSplit([scenes[i] for i in train_ids], [scenes[i] for i in hold_ids],
                        seed, params, train_ids, hold_ids)


# -- PGM masks ------------------------------------------------------------------

def write_mask_pgm(mask: LabelMask) -> bytes:
    labels = np.asarray(mask.labels)
    if labels.max() > 255:
        raise ConfigError("PGM masks hold at most 256 classes")
    H, W = labels.shape
    return f"P5\n{W} {H}\n255\n".encode("ascii") + labels.astype(np.uint8).tobytes()


def read_mask_pgm(data: bytes, num_classes: int | None = None) -> LabelMask:
    """Parse a P5 mask; without ``num_classes`` the class count is inferred."""
    if data[:2] != b"P5":
        raise ParseError(f"expected binary PGM magic 'P5', got {data[:2]!r}", offset=0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError("malformed PGM header", offset=pos)
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError("PGM header must end with a single whitespace byte", offset=pos)
    pos += 1
    W, H, maxval = fields
    if W < 1 or H < 1:
        raise ParseError(f"invalid PGM size {W}x{H}", offset=pos)
    if not 1 <= maxval <= 255:
        raise ParseError(f"unsupported PGM maxval {maxval}", offset=pos)
    payload = data[pos:]
    if len(payload) < W * H:
        raise ParseError(f"PGM payload truncated: {len(payload)} of {W * H} bytes", offset=len(data))
    labels = np.frombuffer(payload, dtype=np.uint8, count=W * H).reshape(H, W).astype(np.int64)
    if num_classes is None:
        return LabelMask(labels, max(2, int(labels.max()) + 1))
    bad = np.flatnonzero(labels.ravel() >= num_classes)
    if bad.size:
        raise ParseError(f"label {labels.ravel()[bad[0]]} >= {num_classes} classes", offset=pos + int(bad[0]))
    return LabelMask(labels, num_classes)


# -- feature binaries -------------------------------------------------------------

def write_features_bin(features: np.ndarray) -> bytes:
    H, W, F = features.shape
    return FEAT_MAGIC + struct.pack("<3I", H, W, F) + np.ascontiguousarray(features, dtype="<f8").tobytes()


def read_features_bin(data: bytes) -> np.ndarray:
    if data[:4] != FEAT_MAGIC:
        raise ParseError(f"bad feature magic {data[:4]!r}", offset=0)
    if len(data) < 16:
        raise ParseError("feature header truncated", offset=len(data))
    H, W, F = struct.unpack_from("<3I", data, 4)
    need = 16 + 8 * H * W * F
    if len(data) != need:
        raise ParseError(f"feature payload has {len(data)} bytes, expected {need}", offset=min(len(data), need))
    return np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64).reshape(H, W, F)


# -- directory layout ----------------------------------------------------------------

MANIFEST = "dataset.json"


def write_dataset(split: DatasetSplit, root) -> Path:
    root = Path(root)
    for name, scenes, ids in (("train", split.train, split.train_ids),
                              ("holdout", split.hold_out, split.hold_out_ids)):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for idx, scene in zip(ids, scenes):
            (d / f"{idx}.pgm").write_bytes(write_mask_pgm(scene.mask))
            (d / f"{idx}.aslf").write_bytes(write_features_bin(scene.features))
    manifest = {"seed": split.seed, "params": asdict(split.params),
                "train": list(split.train_ids), "holdout": list(split.hold_out_ids)}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def read_dataset(root) -> DatasetSplit:
    root = Path(root)
    man_path = root / MANIFEST
    if not man_path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {man_path}")
    man = json.loads(man_path.read_text())
    params = SceneParams(**man["params"])
    splits = {}
    for name in ("train", "holdout"):
        scenes = []
        for idx in man[name]:
            mask = read_mask_pgm((root / name / f"{idx}.pgm").read_bytes(), params.num_classes)
            feats = read_features_bin((root / name / f"{idx}.aslf").read_bytes())
            scenes.append(Scene(feats, mask))
        splits[name] = scenes
    return DatasetSplit(splits["train"], splits["holdout"], int(man["seed"]), params,
                        tuple(man["train"]), tuple(man["holdout"]))


def dataset_digest(split: DatasetSplit) -> str:
    """CRC32 over every scene's bytes, for quick identity checks."""
    crc = 0
    for s in split.train + split.hold_out:
        crc = zlib.crc32(write_features_bin(s.features), crc)
        crc = zlib.crc32(write_mask_pgm(s.mask), crc)
    return f"{crc:08x}"
