"""Acquisition stacks, ground-truth synthesis, normalization and patch datasets."""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateRange,
    InvalidConfig,
    MissingFile,
    MixedShapes,
    NonImageData,
    PatchTooLarge,
    SubsetTooLarge,
)

STACK_FORMATS = ("tiff-stack", "directory-of-images", "raw-array-file")
IMAGE_SUFFIXES = (".png", ".tif", ".tiff")

# raw array file: magic, dtype code (u8), H, W, N (u32 little endian), then N*H*W samples
RAW_MAGIC = b"CLDSTK01"
_RAW_HEADER = struct.Struct("<8sBIII")
_RAW_DTYPES = {1: np.dtype("<u1"), 2: np.dtype("<u2"), 3: np.dtype("<f4"), 4: np.dtype("<f8")}
_RAW_CODES = {v.newbyteorder("="): k for k, v in _RAW_DTYPES.items()}


@dataclass(frozen=True)
class ImageStack:
    """Co-registered single-channel acquisitions of one static sample."""

    frames: np.ndarray  # N x H x W
    name: str
    pixel_range: tuple[float, float]

    def __post_init__(self):
        frames = self.frames
        if frames.ndim != 3:
            raise NonImageData(f"expected N x H x W frames, got shape {frames.shape}")
        if frames.shape[0] < 2:
            raise NonImageData("a stack needs at least two acquisitions to average")
        if not np.all(np.isfinite(frames)) or frames.min() < 0:
            raise NonImageData("intensities must be finite and non-negative")

    @classmethod
    def from_frames(cls, frames: Sequence[np.ndarray], name: str = "stack") -> "ImageStack":
        shapes = {np.shape(f) for f in frames}
        if len(shapes) > 1:
            raise MixedShapes(f"frames disagree on H x W: {sorted(shapes)}")
        arr = np.stack([np.asarray(f) for f in frames])
        if not (np.issubdtype(arr.dtype, np.integer) or np.issubdtype(arr.dtype, np.floating)):
            raise NonImageData(f"unsupported pixel type {arr.dtype}")
        arr.setflags(write=False)
        return cls(arr, name, (float(arr.min()), float(arr.max())))

    def __len__(self):
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]


def _read_image(path: Path) -> np.ndarray:
    try:
        if path.suffix.lower() in (".tif", ".tiff"):
            import tifffile

            img = tifffile.imread(path)
        else:
            import imageio.v3 as iio

            img = iio.imread(path)
    except Exception as exc:  # decoder errors vary by backend
        raise NonImageData(f"{path}: cannot decode ({exc})") from exc
    img = np.asarray(img)
    if img.ndim != 2:
        raise NonImageData(f"{path}: expected a single-channel 2-D image, got shape {img.shape}")
    return img


def load_stack(path, format: str = "tiff-stack", name: Optional[str] = None) -> ImageStack:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    name = name or path.stem
    if format == "tiff-stack":
        import tifffile

        try:
            arr = tifffile.imread(path)
        except Exception as exc:
            raise NonImageData(f"{path}: cannot decode ({exc})") from exc
        if arr.ndim != 3:
            raise NonImageData(f"{path}: expected a multi-page grayscale stack, got shape {arr.shape}")
        frames = list(arr)
    elif format == "directory-of-images":
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise NonImageData(f"{path}: no PNG/TIFF frames found")
        frames = [_read_image(p) for p in files]
    elif format == "raw-array-file":
        frames = list(read_raw_stack(path))
    else:
        raise InvalidConfig(f"unknown stack format {format!r}; expected one of {STACK_FORMATS}")
    return ImageStack.from_frames(frames, name=name)


def write_raw_stack(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise NonImageData("raw stacks are N x H x W")
    code = _RAW_CODES.get(frames.dtype.newbyteorder("="))
    if code is None:
        raise NonImageData(f"dtype {frames.dtype} has no raw code")
    n, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(RAW_MAGIC, code, h, w, n))
        fh.write(np.ascontiguousarray(frames, dtype=_RAW_DTYPES[code]).tobytes())


def read_raw_stack(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _RAW_HEADER.size:
        raise NonImageData(f"{path}: truncated header")
    magic, code, h, w, n = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC or code not in _RAW_DTYPES:
        raise NonImageData(f"{path}: not a raw array stack")
    dtype = _RAW_DTYPES[code]
    body = data[_RAW_HEADER.size:]
    if len(body) != n * h * w * dtype.itemsize:
        raise NonImageData(f"{path}: payload size does not match header")
    return np.frombuffer(body, dtype=dtype).reshape(n, h, w).astype(dtype.newbyteorder("="))


def synthesize_ground_truth(stack: ImageStack) -> np.ndarray:
    """Per-pixel mean over all acquisitions, in raw intensity units."""
    return stack.frames.astype(np.float64).mean(axis=0)


@dataclass(frozen=True)
class NormalizationRecord:
    low_pct: float
    high_pct: float
    p_low: float
    p_high: float

    def apply(self, arr: np.ndarray) -> np.ndarray:
        span = self.p_high - self.p_low
        return np.clip((np.asarray(arr, dtype=np.float64) - self.p_low) / span, 0.0, 1.0)

    def invert(self, arr: np.ndarray) -> np.ndarray:
        return denormalize(arr, self)


IDENTITY_NORMALIZATION = NormalizationRecord(0.0, 100.0, 0.0, 1.0)


def normalize(arr, low_pct: float = 0.1, high_pct: float = 99.9):
    """Percentile rescale to [0, 1].

    Returns the clipped array and the record needed by :func:`denormalize`.
    """
    if not low_pct < high_pct:
        raise InvalidConfig(f"low_pct ({low_pct}) must be below high_pct ({high_pct})")
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonImageData("cannot normalize non-finite values")
    p_low, p_high = np.percentile(arr, [low_pct, high_pct])
    if p_high == p_low:
        raise DegenerateRange(f"percentiles {low_pct}/{high_pct} coincide at {p_low}")
    record = NormalizationRecord(float(low_pct), float(high_pct), float(p_low), float(p_high))
    return record.apply(arr), record


def denormalize(arr, record: NormalizationRecord) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) * (record.p_high - record.p_low) + record.p_low


@dataclass(frozen=True)
class FewShotSpec:
    n_samples: Optional[int] = None  # None means all training pairs
    seed: int = 0

    @classmethod
    def parse(cls, text, seed: int = 0) -> "FewShotSpec":
        text = str(text).strip().lower()
        if text in ("all", "none", ""):
            return cls(None, seed)
        n = int(text)
        if n <= 0:
            raise InvalidConfig("few-shot sample count must be positive")
        return cls(n, seed)

    @property
    def label(self) -> str:
        return "all" if self.n_samples is None else str(self.n_samples)


@dataclass(frozen=True)
class DenoisingDataset:
    """Indexed (noisy, clean) pairs in normalized space with a train/test split.

    Training pairs are consumed as random ``patch_size`` crops; test pairs as
    full frames. Arrays are read-only so the object can be shared by workers.
    """

    name: str
    noisy: tuple
    clean: tuple
    normalization: NormalizationRecord
    train_indices: tuple
    test_indices: tuple
    patch_size: int = 256
    split_seed: int = 0
    test_fraction: float = 0.1
    source: dict = field(default_factory=dict)
    few_shot: FewShotSpec = FewShotSpec()

    def __len__(self):
        return len(self.noisy)

    @property
    def n_train(self) -> int:
        return len(self.train_indices)

    def split_of(self, index: int) -> str:
        if index in self.train_indices:
            return "train"
        if index in self.test_indices:
            return "test"
        return "unused"

    def pair(self, index: int):
        return self.noisy[index], self.clean[index]

    def crop_origin(self, index: int, rng: np.random.Generator) -> tuple[int, int]:
        h, w = self.noisy[index].shape
        p = self.patch_size
        return int(rng.integers(0, h - p + 1)), int(rng.integers(0, w - p + 1))

    def sample_patch(self, index: int, rng: np.random.Generator):
        noisy, clean = self.pair(index)
        r, c = self.crop_origin(index, rng)
        p = self.patch_size
        return noisy[r:r + p, c:c + p], clean[r:r + p, c:c + p]

    def sample_batch(self, indices, rng: np.random.Generator):
        """Stack crops for ``indices`` into two B x 1 x P x P float32 arrays."""
        crops = [self.sample_patch(i, rng) for i in indices]
        noisy = np.stack([n for n, _ in crops])[:, None].astype(np.float32)
        clean = np.stack([c for _, c in crops])[:, None].astype(np.float32)
        return noisy, clean

    def test_pairs(self):
        return [(i, *self.pair(i)) for i in self.test_indices]


def _readonly(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    arr.setflags(write=False)
    return arr


def split_indices(n: int, test_fraction: float, seed: int) -> tuple[tuple, tuple]:
    if not 0 <= test_fraction < 1:
        raise InvalidConfig("test_fraction must lie in [0, 1)")
    n_test = int(round(n * test_fraction))
    order = np.random.default_rng(seed).permutation(n)
    test = tuple(sorted(int(i) for i in order[:n_test]))
    train = tuple(sorted(int(i) for i in order[n_test:]))
    return train, test


def dataset_from_pairs(
    noisy: Sequence[np.ndarray],
    clean: Sequence[np.ndarray],
    *,
    name: str = "pairs",
    normalization: NormalizationRecord = IDENTITY_NORMALIZATION,
    patch_size: int = 256,
    test_fraction: float = 0.1,
    seed: int = 0,
    source: Optional[dict] = None,
    split: Optional[tuple] = None,
) -> DenoisingDataset:
    """Build a dataset from already-normalized pairs."""
    if len(noisy) != len(clean):
        raise MixedShapes("noisy and clean lists differ in length")
    for a, b in zip(noisy, clean):
        if np.shape(a) != np.shape(b):
            raise MixedShapes(f"pair shapes differ: {np.shape(a)} vs {np.shape(b)}")
        if patch_size > min(np.shape(a)):
            raise PatchTooLarge(f"patch {patch_size} exceeds frame {np.shape(a)}")
    train, test = split if split is not None else split_indices(len(noisy), test_fraction, seed)
    # a shared clean frame stays a single array object
    cache = {}
    clean_ro = tuple(cache.setdefault(id(c), _readonly(c)) for c in clean)
    return DenoisingDataset(
        name=name,
        noisy=tuple(_readonly(a) for a in noisy),
        clean=clean_ro,
        normalization=normalization,
        train_indices=tuple(train),
        test_indices=tuple(test),
        patch_size=int(patch_size),
        split_seed=int(seed),
        test_fraction=float(test_fraction),
        source=dict(source or {}),
    )


def build_dataset(
    stack: ImageStack,
    gt: np.ndarray,
    patch_size: int = 256,
    test_fraction: float = 0.1,
    seed: int = 0,
    low_pct: float = 0.1,
    high_pct: float = 99.9,
    normalization: Optional[NormalizationRecord] = None,
    source: Optional[dict] = None,
) -> DenoisingDataset:
    """Pair every noisy frame with the shared ground truth.

    Noisy frames and ground truth go through the same percentile map, taken
    from the whole noisy stack.
    """
    h, w = stack.shape
    if np.shape(gt) != (h, w):
        raise MixedShapes(f"ground truth {np.shape(gt)} does not match frames {(h, w)}")
    if patch_size > min(h, w):
        raise PatchTooLarge(f"patch {patch_size} exceeds frame {(h, w)}")
    if normalization is None:
        _, normalization = normalize(stack.frames, low_pct, high_pct)
    noisy = [normalization.apply(f) for f in stack.frames]
    clean = normalization.apply(gt)
    return dataset_from_pairs(
        noisy,
        [clean] * len(noisy),
        name=stack.name,
        normalization=normalization,
        patch_size=patch_size,
        test_fraction=test_fraction,
        seed=seed,
        source=source,
    )


def few_shot_subset(dataset: DenoisingDataset, spec: FewShotSpec) -> DenoisingDataset:
    if spec.n_samples is None:
        return dataset
    n_train = dataset.n_train
    if spec.n_samples > n_train:
        raise SubsetTooLarge(f"requested {spec.n_samples} of {n_train} training pairs")
    pick = np.random.default_rng(spec.seed).permutation(n_train)[: spec.n_samples]
    chosen = tuple(sorted(dataset.train_indices[i] for i in pick))
    return dataclasses.replace(dataset, train_indices=chosen, few_shot=spec)


@dataclass(frozen=True)
class AugmentationChain:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rot90: float = 0.5
    intensity_range: tuple = (0.9, 1.1)
    noise_sigma: float = 0.02

    @classmethod
    def identity(cls) -> "AugmentationChain":
        return cls(0.0, 0.0, 0.0, (1.0, 1.0), 0.0)

    def view(self, patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = patch
        if rng.random() < self.p_hflip:
            out = out[:, ::-1]
        if rng.random() < self.p_vflip:
            out = out[::-1, :]
        # rotation would change the shape of a non-square patch
        if rng.random() < self.p_rot90 and out.shape[0] == out.shape[1]:
            out = np.rot90(out, k=int(rng.integers(1, 4)))
        lo, hi = self.intensity_range
        if lo != 1.0 or hi != 1.0:
            out = out * rng.uniform(lo, hi)
        if self.noise_sigma > 0:
            out = np.clip(out + rng.normal(0.0, self.noise_sigma, out.shape), 0.0, 1.0)
        return np.ascontiguousarray(out, dtype=patch.dtype)


def contrastive_augment(patch: np.ndarray, seed, chain: AugmentationChain = AugmentationChain()):
    """Two stochastic views of ``patch``, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    return chain.view(patch, rng), chain.view(patch, rng)


def make_shapes_dataset(
    n_images: int = 20,
    size: int = 96,
    noise_sigma: float = 0.1,
    seed: int = 0,
    n_shapes: int = 12,
):
    """Random ellipses/rectangles on a dim background plus Gaussian noise.

    Returns (noisy, clean) lists; clean values lie in [0, 1], noisy values are
    left unclipped.
    """
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    noisy, clean = [], []
    for _ in range(n_images):
        img = np.full((size, size), 0.1)
        for _ in range(n_shapes):
            cy, cx = rng.uniform(0, size, 2)
            ry, rx = rng.uniform(size / 24, size / 6, 2)
            if rng.random() < 0.5:
                mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
            else:
                mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
            img[mask] = rng.uniform(0.3, 0.9)
        img = gaussian_filter(img, 1.0)
        clean.append(img)
        noisy.append(img + rng.normal(0.0, noise_sigma, img.shape))
    return noisy, clean


def synthetic_dataset(
    n_images: int = 20,
    size: int = 96,
    noise_sigma: float = 0.1,
    seed: int = 0,
    patch_size: int = 64,
    test_fraction: float = 0.2,
    name: str = "shapes",
) -> DenoisingDataset:
    noisy, clean = make_shapes_dataset(n_images, size, noise_sigma, seed)
    source = {
        "format": "synthetic",
        "n_images": n_images,
        "size": size,
        "noise_sigma": noise_sigma,
        "synthetic_seed": seed,
    }
    return dataset_from_pairs(
        noisy, clean, name=name, patch_size=patch_size,
        test_fraction=test_fraction, seed=seed, source=source,
    )


# -- manifest -----------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def manifest_dict(dataset: DenoisingDataset) -> dict:
    rec = dataset.normalization
    entries = {"name": dataset.name}
    entries.update({k: dataset.source[k] for k in sorted(dataset.source)})
    entries.update(
        low_pct=rec.low_pct,
        high_pct=rec.high_pct,
        p_low=rec.p_low,
        p_high=rec.p_high,
        patch_size=dataset.patch_size,
        test_fraction=dataset.test_fraction,
        split_seed=dataset.split_seed,
        few_shot=dataset.few_shot.label,
        few_shot_seed=dataset.few_shot.seed,
        train_indices=dataset.train_indices,
        test_indices=dataset.test_indices,
    )
    return entries


def manifest_text(dataset: DenoisingDataset) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in manifest_dict(dataset).items())


def manifest_hash(dataset: DenoisingDataset) -> str:
    return hashlib.sha256(manifest_text(dataset).encode()).hexdigest()


def write_manifest(dataset: DenoisingDataset, path) -> Path:
    path = Path(path)
    path.write_text(manifest_text(dataset))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    entries = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidConfig(f"{path}: malformed manifest line {line!r}")
        entries[key.strip()] = value.strip()
    return entries


def _indices(text: str) -> tuple:
    return tuple(int(t) for t in text.split(",") if t.strip())


def dataset_from_manifest(path_or_entries) -> DenoisingDataset:
    """Rebuild the exact dataset (normalization, split, subset) a manifest records."""
    m = path_or_entries if isinstance(path_or_entries, dict) else read_manifest(path_or_entries)
    split = (_indices(m["train_indices"]), _indices(m["test_indices"]))
    patch_size = int(m["patch_size"])
    test_fraction = float(m["test_fraction"])
    seed = int(m["split_seed"])
    if m.get("format") == "synthetic":
        noisy, clean = make_shapes_dataset(
            int(m["n_images"]), int(m["size"]), float(m["noise_sigma"]), int(m["synthetic_seed"])
        )
        source = {k: m[k] for k in ("format", "n_images", "size", "noise_sigma", "synthetic_seed")}
        ds = dataset_from_pairs(
            noisy, clean, name=m["name"], patch_size=patch_size, test_fraction=test_fraction,
            seed=seed, source=source, split=split,
        )
    else:
        stack = load_stack(m["stack_path"], m["format"], name=m["name"])
        record = NormalizationRecord(
            float(m["low_pct"]), float(m["high_pct"]), float(m["p_low"]), float(m["p_high"])
        )
        noisy = [record.apply(f) for f in stack.frames]
        clean = record.apply(synthesize_ground_truth(stack))
        ds = dataset_from_pairs(
            noisy, [clean] * len(noisy), name=m["name"], normalization=record,
            patch_size=patch_size, test_fraction=test_fraction, seed=seed,
            source={"stack_path": m["stack_path"], "format": m["format"]}, split=split,
        )
    few = FewShotSpec.parse(m.get("few_shot", "all"), int(m.get("few_shot_seed", 0)))
    return dataclasses.replace(ds, few_shot=few)


def ingest(path, format: str = "tiff-stack", *, patch_size: int = 256, test_fraction: float = 0.1,
           seed: int = 0, low_pct: float = 0.1, high_pct: float = 99.9, name: Optional[str] = None):
    """Load a stack, average it into ground truth and build the paired dataset."""
    stack = load_stack(path, format, name=name)
    gt = synthesize_ground_truth(stack)
    source = {"stack_path": str(Path(path).resolve()), "format": format}
    return build_dataset(stack, gt, patch_size, test_fraction, seed, low_pct, high_pct, source=source)
