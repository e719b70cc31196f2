"""Dataset loading, netpbm parsing, resizing, fold splitting, and the
synthetic challenge-corpus generator.

Directory layout for real datasets: ``<root>/images/<id>.(pgm|ppm|tnsr)``
paired with ``<root>/masks/<id>.pgm``. Binary PGM (P5) and PPM (P6) with
maxval 255 are the only pixel formats accepted.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import FormatError, ShapeError, Tensor, read_tnsr


class PairingError(ValueError):
    """Image and mask extents disagree."""


class InvalidSplitError(ValueError):
    """Fold split requested with fewer samples than folds."""


CHALLENGES = ("clean", "scale_vary", "faint_boundary", "perturbed",
              "outliers", "majority_class")


@dataclass
class Sample:
    """One image/mask pair. Image values lie in [0, 1]; the mask is strictly
    binary with a single channel."""

    image: Tensor
    mask: Tensor
    id: str

    def __post_init__(self):
        if self.image.shape[:-1] != self.mask.shape[:-1]:
            raise PairingError(
                f"{self.id}: image extents {self.image.shape[:-1]} != "
                f"mask extents {self.mask.shape[:-1]}")
        if self.mask.shape[-1] != 1:
            raise ShapeError(f"{self.id}: mask must have one channel")
        if not np.isin(self.mask.data, (0.0, 1.0)).all():
            raise ValueError(f"{self.id}: mask is not strictly binary")


class Dataset:
    """An ordered collection of samples, sorted by id."""

    def __init__(self, samples, name: str = ""):
        samples = sorted(samples, key=lambda s: s.id)
        ids = [s.id for s in samples]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sample ids")
        self.samples: list[Sample] = samples
        self.name = name

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def channels(self) -> int:
        return self.samples[0].image.shape[-1]

    @property
    def extents(self) -> tuple[int, ...]:
        return self.samples[0].image.shape[:-1]

    def subset(self, indices) -> list[Sample]:
        return [self.samples[i] for i in indices]


# -- netpbm ------------------------------------------------------------------


def _parse_netpbm(raw: bytes, path) -> np.ndarray:
    if raw[:2] not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    color = raw[:2] == b"P6"
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token.isdigit():
            raise FormatError(f"{path}: malformed header token {token!r}")
        fields.append(int(token))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    count = width * height * (3 if color else 1)
    raster = raw[pos:pos + count]
    if len(raster) != count:
        raise FormatError(f"{path}: truncated raster")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(height, width, 3) if color else arr.reshape(height, width)


def read_netpbm(path) -> np.ndarray:
    """uint8 array [H,W] for P5 or [H,W,3] for P6."""
    with open(path, "rb") as fp:
        return _parse_netpbm(fp.read(), path)


def write_pgm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    with open(path, "wb") as fp:
        fp.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        fp.write(arr.tobytes())


def write_ppm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    with open(path, "wb") as fp:
        fp.write(b"P6\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        fp.write(arr.tobytes())


MASK_THRESHOLD = 128  # 8-bit annotations binarize at half intensity


def load_sample(image_path, mask_path) -> Sample:
    """Load one image/mask pair.

    Pixel images are scaled by 1/255 into [0, 1]; mask pixels at or above
    128 map to foreground. TNSR images are taken as already normalized.
    """
    image_path = Path(image_path)
    suffix = image_path.suffix.lower()
    if suffix == ".tnsr":
        t = read_tnsr(image_path)
        if t.data.ndim != 3:
            raise FormatError(f"{image_path}: tensor images must be [H,W,C]")
        if t.data.min() < 0.0 or t.data.max() > 1.0:
            raise FormatError(f"{image_path}: tensor image values must lie in [0, 1]")
        image = t.data.astype(np.float32)
    elif suffix in (".pgm", ".ppm"):
        arr = read_netpbm(image_path)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        image = arr.astype(np.float32) / 255.0
    else:
        raise FormatError(f"{image_path}: unsupported image format {suffix!r}")

    mask_raw = read_netpbm(mask_path)
    if mask_raw.ndim != 2:
        raise FormatError(f"{mask_path}: masks must be grayscale PGM")
    mask = (mask_raw >= MASK_THRESHOLD).astype(np.float32)[:, :, None]
    if image.shape[:2] != mask.shape[:2]:
        raise PairingError(
            f"{image_path.stem}: image {image.shape[:2]} vs mask {mask.shape[:2]}")
    return Sample(image=Tensor(image), mask=Tensor(mask), id=image_path.stem)


def load_dataset(root, resize_to=None) -> Dataset:
    root = Path(root)
    image_dir = root / "images"
    mask_dir = root / "masks"
    if not image_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"{root} must contain images/ and masks/ directories")
    samples = []
    for image_path in sorted(image_dir.iterdir()):
        if image_path.suffix.lower() not in (".pgm", ".ppm", ".tnsr"):
            continue
        mask_path = mask_dir / f"{image_path.stem}.pgm"
        if not mask_path.exists():
            raise FileNotFoundError(f"no mask for {image_path.stem}")
        s = load_sample(image_path, mask_path)
        if resize_to is not None:
            s = Sample(image=resize(s.image, resize_to, kind="image"),
                       mask=resize(s.mask, resize_to, kind="mask"),
                       id=s.id)
        samples.append(s)
    if not samples:
        raise FileNotFoundError(f"no samples found under {root}")
    return Dataset(samples, name=str(root))


# -- resizing -----------------------------------------------------------------


def _axis_coords(n_out: int, n_in: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    return i0c, i1c, frac


def resize(t, new_extents, kind: str = "image") -> Tensor:
    """Resize [H,W,C] data: bilinear for images, nearest for masks.

    Nearest-neighbor gathers pixels without arithmetic, so binary masks
    stay strictly binary; the bilinear form a + (b-a)*f reproduces the
    input exactly when both neighbors coincide (identity resizes are
    bitwise equal).
    """
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim != 3:
        raise ShapeError(f"resize expects [H,W,C], got shape {arr.shape}")
    hn, wn = (int(e) for e in new_extents)
    if hn < 1 or wn < 1:
        raise ShapeError(f"invalid target extents {(hn, wn)}")
    h, w, _ = arr.shape
    if kind == "mask":
        iy = np.clip(np.floor((np.arange(hn) + 0.5) * (h / hn)).astype(np.int64), 0, h - 1)
        ix = np.clip(np.floor((np.arange(wn) + 0.5) * (w / wn)).astype(np.int64), 0, w - 1)
        return Tensor(arr[iy][:, ix].copy())
    if kind != "image":
        raise ValueError(f"unknown resize kind {kind!r}")
    y0, y1, fy = _axis_coords(hn, h)
    rows = arr[y0] + (arr[y1] - arr[y0]) * fy[:, None, None].astype(arr.dtype)
    x0, x1, fx = _axis_coords(wn, w)
    out = rows[:, x0] + (rows[:, x1] - rows[:, x0]) * fx[None, :, None].astype(arr.dtype)
    return Tensor(out)


# -- fold splitting ------------------------------------------------------------


@dataclass
class FoldSplit:
    """k mutually exclusive index lists covering every position once."""

    folds: list[list[int]]

    def validate(self, n_samples: int) -> None:
        flat = [i for fold in self.folds for i in fold]
        assert sorted(flat) == list(range(n_samples)), "folds must cover every index once"
        sizes = [len(f) for f in self.folds]
        assert max(sizes) - min(sizes) <= 1, "fold sizes may differ by at most 1"

    def train_indices(self, held_out: int) -> list[int]:
        return [i for f, fold in enumerate(self.folds) if f != held_out for i in fold]


def kfold_split(n_samples: int, k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded uniform shuffle followed by a contiguous near-equal partition."""
    if n_samples < k:
        raise InvalidSplitError(f"cannot split {n_samples} samples into {k} folds")
    if k < 2:
        raise InvalidSplitError(f"need at least 2 folds, got {k}")
    perm = np.random.default_rng(seed).permutation(n_samples)
    base = n_samples // k
    extra = n_samples % k
    folds = []
    pos = 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        folds.append([int(i) for i in perm[pos:pos + size]])
        pos += size
    split = FoldSplit(folds)
    split.validate(n_samples)
    return split


# -- synthetic corpus -----------------------------------------------------------


def _ellipse_field(h: int, w: int, cy: float, cx: float, ra: float, rb: float,
                   theta: float) -> np.ndarray:
    """Quadratic-form value per pixel; the ellipse boundary sits at 1."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (u / ra) ** 2 + (v / rb) ** 2


def _soft_edge(rho: np.ndarray, softness: float) -> np.ndarray:
    z = np.minimum((rho - 1.0) / softness, 60.0)  # exp would overflow far out
    return 1.0 / (1.0 + np.exp(z))


def _low_freq_field(rng, h: int, w: int, cells: int = 8) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(max(2, h // cells), max(2, w // cells), 1))
    return resize(coarse.astype(np.float32), (h, w), kind="image").data[:, :, 0]


def _draw_sample(rng: np.random.Generator, h: int, w: int, channels: int,
                 challenge: str) -> tuple[np.ndarray, np.ndarray, dict]:
    scale = min(h, w) / 64.0
    info: dict = {}
    if challenge == "majority_class":
        n_blobs = 1
        radius_range = (0.44 * min(h, w), 0.50 * min(h, w))
    elif challenge == "scale_vary":
        n_blobs = int(rng.integers(1, 3))
        radius_range = (3.5 * scale, 14.0 * scale)
    else:
        n_blobs = int(rng.integers(1, 4))
        radius_range = (5.0 * scale, 13.0 * scale)

    mask = np.zeros((h, w), dtype=bool)
    alpha = np.zeros((h, w), dtype=np.float64)
    soft = challenge == "faint_boundary"
    for _ in range(n_blobs):
        ra = rng.uniform(*radius_range)
        rb = rng.uniform(*radius_range)
        if challenge == "majority_class":
            cy = h / 2 + rng.uniform(-2 * scale, 2 * scale)
            cx = w / 2 + rng.uniform(-2 * scale, 2 * scale)
        else:
            margin = 2.0
            cy = rng.uniform(margin, h - margin)
            cx = rng.uniform(margin, w - margin)
        rho = _ellipse_field(h, w, cy, cx, ra, rb, rng.uniform(0, np.pi))
        mask |= rho <= 1.0
        if soft:
            alpha = np.maximum(alpha, _soft_edge(rho, 0.12))
        else:
            alpha = np.maximum(alpha, (rho <= 1.0).astype(np.float64))

    bg = rng.uniform(0.12, 0.30)
    if challenge == "faint_boundary":
        contrast = rng.uniform(0.06, 0.12)
    else:
        contrast = rng.uniform(0.40, 0.62)
    base = bg + contrast * alpha

    if challenge == "perturbed":
        base = base + 0.16 * _low_freq_field(rng, h, w)
        speckle = rng.random((h, w)) < 0.01
        base = base + np.where(speckle, rng.uniform(-0.3, 0.3, size=(h, w)), 0.0)

    if challenge == "outliers":
        n_dots = int(rng.integers(3, 9))
        dots = np.zeros((h, w), dtype=bool)
        placed = 0
        for _ in range(40):
            if placed == n_dots:
                break
            cy = rng.uniform(2, h - 2)
            cx = rng.uniform(2, w - 2)
            r = rng.uniform(1.0, 2.5) * scale
            rho = _ellipse_field(h, w, cy, cx, r, r, 0.0)
            dot = rho <= 1.0
            if (dot & mask).any():
                continue
            dots |= dot
            placed += 1
        base = np.where(dots, bg + contrast * rng.uniform(0.9, 1.1), base)
        info["distractors"] = dots

    image = np.empty((h, w, channels), dtype=np.float64)
    for c in range(channels):
        jitter = rng.uniform(-0.04, 0.04)
        noise = rng.normal(0.0, 0.02, size=(h, w))
        image[:, :, c] = base + jitter + noise
    image = np.clip(image, 0.0, 1.0)
    return image.astype(np.float32), mask[:, :, None].astype(np.float32), info


_FRACTION_BOUNDS = {
    "clean": (0.05, 0.40),
    "scale_vary": (0.01, 0.55),
    "faint_boundary": (0.05, 0.40),
    "perturbed": (0.05, 0.40),
    "outliers": (0.05, 0.40),
    "majority_class": (0.55, 0.95),
}


def synth_generate(n: int, extents=(64, 64), challenge: str = "clean",
                   seed: int = 0, channels: int = 3) -> Dataset:
    """Seeded elliptical-blob corpus with exact masks.

    Challenge modes vary the blob scale, soften edge contrast, texture the
    background, inject bright non-mask distractors, or invert the
    foreground/background ratio. Every emitted sample is audited against
    its mode's foreground-fraction bounds (resampling when a draw misses).
    """
    if challenge not in CHALLENGES:
        raise ValueError(f"unknown challenge {challenge!r}")
    h, w = (int(e) for e in extents)
    if h % 16 or w % 16:
        raise ShapeError(f"extents must be divisible by 16, got {(h, w)}")
    rng = np.random.default_rng(seed)
    lo, hi = _FRACTION_BOUNDS[challenge]
    samples = []
    for i in range(n):
        for _ in range(100):
            image, mask, info = _draw_sample(rng, h, w, channels, challenge)
            fraction = float(mask.mean())
            ok = lo <= fraction <= hi
            if challenge == "outliers":
                ok = ok and info["distractors"].any()
            if ok:
                break
        else:
            raise RuntimeError(f"could not satisfy audit bounds for {challenge}")
        if "distractors" in info:
            assert not (info["distractors"] & (mask[:, :, 0] > 0)).any()
        samples.append(Sample(image=Tensor(image), mask=Tensor(mask),
                              id=f"{challenge}_{i:04d}"))
    ds = Dataset(samples, name=f"synth:{challenge}")
    if challenge == "majority_class":
        coverage = float(np.mean([s.mask.data.mean() for s in ds]))
        assert coverage > 0.6, f"majority-class coverage {coverage:.3f} too low"
    return ds
