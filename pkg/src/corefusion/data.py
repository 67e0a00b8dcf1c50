"""Image data model, synthetic paired scenes, degradation and on-disk layout.

Images are ``(channels, height, width)`` float arrays. Numpy arrays are the
storage type; :func:`upsample_bilinear` and :func:`downsample_x8` also accept
torch tensors (with an optional leading batch axis) so the model can use the
same operators inside the autograd graph.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

SCALE = 8
MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA_VERSION = 1
RGB_FILE = "rgb.png"
LR_FILE = "lr_thermal.png"
HR_FILE = "hr_thermal.png"
SPLITS = ("train", "val")
MODALITIES = ("rgb", "lr_thermal", "hr_thermal")


class DataError(Exception):
    """Base class for dataset loading failures."""


class MissingFileError(DataError, FileNotFoundError):
    pass


class MalformedFileError(DataError, ValueError):
    pass


class DimensionMismatchError(DataError, ValueError):
    pass


def as_image(values, channels: Optional[int] = None, name: str = "image") -> np.ndarray:
    """Validate and return a ``(C, H, W)`` float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"{name} must have shape (C, H, W), got {arr.shape}")
    if channels is not None and arr.shape[0] != channels:
        raise ValueError(f"{name} must have {channels} channel(s), got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass
class SamplePair:
    """One registered training triplet.

    Any of the three images may be ``None`` when it was deliberately not
    loaded (missing-modality evaluation never touches the absent file).
    """

    hr_rgb: Optional[np.ndarray]
    lr_thermal: Optional[np.ndarray]
    hr_thermal: Optional[np.ndarray]
    scene_id: str = ""

    def __post_init__(self):
        if self.hr_rgb is not None:
            self.hr_rgb = as_image(self.hr_rgb, 3, "hr_rgb")
        if self.lr_thermal is not None:
            self.lr_thermal = as_image(self.lr_thermal, 1, "lr_thermal")
        if self.hr_thermal is not None:
            self.hr_thermal = as_image(self.hr_thermal, 1, "hr_thermal")
        hr = [im.shape[1:] for im in (self.hr_rgb, self.hr_thermal) if im is not None]
        if len(hr) == 2 and hr[0] != hr[1]:
            raise ValueError(f"hr_rgb {hr[0]} and hr_thermal {hr[1]} differ in size")
        if hr:
            h, w = hr[0]
            if h % SCALE or w % SCALE:
                raise ValueError(f"HR size {h}x{w} is not divisible by {SCALE}")
            if self.lr_thermal is not None and self.lr_thermal.shape[1:] != (h // SCALE, w // SCALE):
                raise ValueError(
                    f"lr_thermal is {self.lr_thermal.shape[1:]}, expected {(h // SCALE, w // SCALE)}"
                )

    @property
    def hr_size(self):
        for im in (self.hr_rgb, self.hr_thermal):
            if im is not None:
                return im.shape[1:]
        return tuple(SCALE * s for s in self.lr_thermal.shape[1:])


@dataclass
class DatasetManifest:
    root: Path
    scene_ids: List[str]
    splits: Dict[str, str]
    seed: int
    height: int
    width: int

    def __post_init__(self):
        self.root = Path(self.root)
        if len(set(self.scene_ids)) != len(self.scene_ids):
            raise ValueError("duplicate scene ids in manifest")
        if set(self.splits) != set(self.scene_ids):
            raise ValueError("every scene must be assigned to exactly one split")
        bad = {s for s in self.splits.values() if s not in SPLITS}
        if bad:
            raise ValueError(f"unknown split name(s): {sorted(bad)}")

    def scenes(self, split: str) -> List[str]:
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
        return [s for s in self.scene_ids if self.splits[s] == split]

    def to_dict(self) -> dict:
        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "seed": self.seed,
            "dims": {"height": self.height, "width": self.width},
            "scenes": list(self.scene_ids),
            "splits": {name: self.scenes(name) for name in SPLITS},
        }

    def save(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.is_file():
            raise MissingFileError(f"no manifest at {path}")
        try:
            doc = json.loads(path.read_text())
            splits = {sid: name for name in SPLITS for sid in doc["splits"].get(name, [])}
            return cls(
                root=root,
                scene_ids=list(doc["scenes"]),
                splits=splits,
                seed=int(doc["seed"]),
                height=int(doc["dims"]["height"]),
                width=int(doc["dims"]["width"]),
            )
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise MalformedFileError(f"malformed manifest {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# resampling


def _check_divisible(h: int, w: int, factor: int = SCALE):
    if h % factor or w % factor:
        raise ValueError(f"spatial size {h}x{w} is not divisible by {factor}")


def downsample_x8(img):
    """8x8 non-overlapping area average. Preserves the global mean."""
    if isinstance(img, torch.Tensor):
        _check_divisible(*img.shape[-2:])
        squeeze = img.dim() == 3
        out = F.avg_pool2d(img.unsqueeze(0) if squeeze else img, SCALE)
        return out.squeeze(0) if squeeze else out
    arr = as_image(img)
    c, h, w = arr.shape
    _check_divisible(h, w)
    return arr.reshape(c, h // SCALE, SCALE, w // SCALE, SCALE).mean(axis=(2, 4))


def upsample_bilinear(img, out_h: int, out_w: int):
    """Bilinear resize with align-corners sampling.

    Torch input stays in the autograd graph; numpy input returns numpy.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    is_numpy = not isinstance(img, torch.Tensor)
    t = torch.from_numpy(as_image(img)) if is_numpy else img
    h, w = t.shape[-2:]
    if out_h < h or out_w < w:
        raise ValueError(f"cannot upsample {h}x{w} to smaller {out_h}x{out_w}")
    squeeze = t.dim() == 3
    t4 = t.unsqueeze(0) if squeeze else t
    if (out_h, out_w) == (h, w):
        out = t4
    else:
        out = F.interpolate(t4, size=(out_h, out_w), mode="bilinear", align_corners=True)
    out = out.squeeze(0) if squeeze else out
    return out.numpy() if is_numpy else out


def normalize(img):
    """Map [0, 1] to [-1, 1]; no clamping."""
    return 2.0 * img - 1.0


def denormalize(img):
    """Map [-1, 1] to [0, 1]; no clamping."""
    return (img + 1.0) / 2.0


def augment_flip(pair: SamplePair, flip_h: bool, flip_v: bool) -> SamplePair:
    """Apply the same horizontal/vertical flip to every image of the pair."""
    axes = tuple(ax for ax, on in ((-1, flip_h), (-2, flip_v)) if on)

    def flip(im):
        if im is None or not axes:
            return im
        return np.flip(im, axis=axes).copy()

    return SamplePair(flip(pair.hr_rgb), flip(pair.lr_thermal), flip(pair.hr_thermal), pair.scene_id)


# ---------------------------------------------------------------------------
# synthetic scenes


def scene_id_for(index: int) -> str:
    return f"scene_{index:04d}"


def synthesize_scene(seed: int, index: int, height: int, width: int) -> SamplePair:
    """Procedural registered RGB/thermal scene.

    A Voronoi partition supplies region boundaries common to both images.
    Thermal is per-region temperature plus Gaussian hot blobs, lightly
    smoothed; RGB gets per-region colours, a faint trace of the hot objects
    and fine texture that thermal does not have.
    """
    _check_divisible(height, width)
    rng = np.random.default_rng([seed, index])
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    n_regions = int(rng.integers(3, 7))
    centers = rng.uniform([0, 0], [height, width], size=(n_regions, 2))
    d2 = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
    labels = np.argmin(d2, axis=0)

    region_temp = rng.permutation(np.linspace(0.1, 0.55, n_regions)) + rng.uniform(-0.03, 0.03, n_regions)
    thermal = region_temp[labels]
    blobs = np.zeros((height, width))
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform([0, 0], [height, width])
        sigma = rng.uniform(0.05, 0.15) * min(height, width)
        amp = rng.uniform(0.15, 0.4)
        blobs += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    thermal = ndimage.gaussian_filter(thermal + blobs, sigma=0.8, mode="nearest")
    thermal = np.clip(thermal, 0.0, 1.0)

    # region brightness tracks region temperature so both images share edges
    brightness = 0.15 + 1.3 * (region_temp - 0.1) + rng.uniform(-0.05, 0.05, n_regions)
    region_rgb = brightness[:, None] * rng.uniform(0.75, 1.0, size=(n_regions, 3))
    rgb = region_rgb[labels].transpose(2, 0, 1)
    rgb = rgb + 0.15 * blobs[None]
    rgb = rgb + rng.normal(0.0, 0.02, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)

    hr_thermal = thermal[None]
    return SamplePair(rgb, downsample_x8(hr_thermal), hr_thermal, scene_id_for(index))


def generate_synthetic_dataset(
    seed: int,
    count: int,
    height: int,
    width: int,
    root,
    val_count: Optional[int] = None,
) -> DatasetManifest:
    """Write ``count`` synthetic scenes under ``root`` and return the manifest.

    The last ``val_count`` scenes (default 20 %) form the validation split.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if height < SCALE or width < SCALE:
        raise ValueError(f"image size {height}x{width} is smaller than {SCALE}")
    _check_divisible(height, width)
    if val_count is None:
        val_count = count // 5
    if not 0 <= val_count <= count:
        raise ValueError(f"val_count must lie in [0, {count}], got {val_count}")

    root = Path(root)
    ids = [scene_id_for(i) for i in range(count)]
    n_train = count - val_count
    manifest = DatasetManifest(
        root=root,
        scene_ids=ids,
        splits={sid: ("train" if i < n_train else "val") for i, sid in enumerate(ids)},
        seed=seed,
        height=height,
        width=width,
    )
    for i in range(count):
        save_pair(synthesize_scene(seed, i, height, width), root)
    manifest.save()
    return manifest


# ---------------------------------------------------------------------------
# PNG storage


def _to_uint(img: np.ndarray, bits: int) -> np.ndarray:
    top = (1 << bits) - 1
    q = np.floor(np.clip(img, 0.0, 1.0) * top + 0.5)
    return q.astype(np.uint16 if bits == 16 else np.uint8)


def save_pair(pair: SamplePair, root) -> Path:
    """Write the pair to ``<root>/<scene_id>/``; returns the scene directory."""
    if not pair.scene_id:
        raise ValueError("pair needs a scene_id to be saved")
    scene_dir = Path(root) / pair.scene_id
    scene_dir.mkdir(parents=True, exist_ok=True)
    if pair.hr_rgb is not None:
        Image.fromarray(_to_uint(pair.hr_rgb, 8).transpose(1, 2, 0), mode="RGB").save(scene_dir / RGB_FILE)
    for name, im in ((LR_FILE, pair.lr_thermal), (HR_FILE, pair.hr_thermal)):
        if im is not None:
            Image.fromarray(_to_uint(im[0], 16)).save(scene_dir / name)
    return scene_dir


def _read_png(path: Path, expect_rgb: bool) -> np.ndarray:
    if not path.is_file():
        raise MissingFileError(f"missing image file {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise MalformedFileError(f"cannot decode {path}: {exc}") from exc
    if expect_rgb:
        if mode != "RGB":
            raise MalformedFileError(f"{path} has mode {mode}, expected 8-bit RGB")
        return arr.astype(np.float64).transpose(2, 0, 1) / 255.0
    if mode not in ("I;16", "I;16B", "I"):
        raise MalformedFileError(f"{path} has mode {mode}, expected 16-bit grayscale")
    return arr.astype(np.float64)[None] / 65535.0


def load_pair(manifest: DatasetManifest, scene_id: str, modalities: Sequence[str] = MODALITIES) -> SamplePair:
    """Read the requested images of one scene; others are left as ``None``."""
    unknown = set(modalities) - set(MODALITIES)
    if unknown:
        raise ValueError(f"unknown modalities {sorted(unknown)}")
    if scene_id not in manifest.splits:
        raise MissingFileError(f"scene {scene_id!r} is not in the manifest at {manifest.root}")
    scene_dir = manifest.root / scene_id
    h, w = manifest.height, manifest.width
    expected = {"rgb": (3, h, w), "lr_thermal": (1, h // SCALE, w // SCALE), "hr_thermal": (1, h, w)}
    files = {"rgb": RGB_FILE, "lr_thermal": LR_FILE, "hr_thermal": HR_FILE}
    images = {}
    for name in modalities:
        arr = _read_png(scene_dir / files[name], expect_rgb=name == "rgb")
        if arr.shape != expected[name]:
            raise DimensionMismatchError(
                f"{scene_dir / files[name]} has shape {arr.shape}, manifest implies {expected[name]}"
            )
        images[name] = arr
    return SamplePair(images.get("rgb"), images.get("lr_thermal"), images.get("hr_thermal"), scene_id)


def load_split(manifest: DatasetManifest, split: str, modalities: Sequence[str] = MODALITIES) -> List[SamplePair]:
    return [load_pair(manifest, sid, modalities) for sid in manifest.scenes(split)]


def stack_pairs(pairs: Sequence[SamplePair]):
    """Stack a list of pairs into ``(rgb, lr_thermal, hr_thermal)`` batch arrays."""
    out = []
    for attr in ("hr_rgb", "lr_thermal", "hr_thermal"):
        ims = [getattr(p, attr) for p in pairs]
        out.append(None if any(im is None for im in ims) else np.stack(ims))
    return tuple(out)


def is_empty_dir(path) -> bool:
    return not os.path.exists(path) or (os.path.isdir(path) and not os.listdir(path))
