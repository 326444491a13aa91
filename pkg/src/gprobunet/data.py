"""Synthetic multi-rater segmentation corpora.

Each object is a core disk that every annotating rater includes, plus an
ambiguous annex (a second disk overlapping the core's rim). A rater
annotates the object at all with probability ``p`` and, when annotating,
includes the annex with probability ``p``. ``p = 1`` gives full agreement;
small ``p`` gives strong presence and boundary disagreement.

On-disk layout::

    <dir>/manifest.json
    <dir>/images/<id>.pgm            16-bit binary PGM (P5, maxval 65535, big-endian)
    <dir>/masks/rater_<k>/<id>.pgm   8-bit binary PGM (P5, maxval 255, values {0, 255})

Image intensities are quantised to multiples of 1/65535 at generation time,
so saving and loading is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    image_size: int = 32
    n_raters: int = 4
    core_radius: tuple[float, float] = (4.0, 7.0)
    # annex disk radius as a fraction of the core radius
    annex_radius: tuple[float, float] = (0.7, 1.0)
    min_annex_fraction: float = 0.25
    p: float = 0.5
    noise: float = 0.05
    presence_probability: float = 1.0
    annex_intensity: float = 0.6
    blur_sigma: float = 1.0
    n_samples: int = 700
    split_sizes: tuple[int, int, int] | None = (500, 100, 100)
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        self.core_radius = tuple(float(v) for v in self.core_radius)
        self.annex_radius = tuple(float(v) for v in self.annex_radius)
        self.split_fractions = tuple(float(v) for v in self.split_fractions)
        if self.split_sizes is not None:
            self.split_sizes = tuple(int(v) for v in self.split_sizes)
        self.validate()

    def validate(self) -> None:
        for name in ("p", "presence_probability", "min_annex_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name} must lie in [0, 1], got {v}")
        if self.image_size < 8 or self.image_size % 8:
            raise DataError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        if self.n_raters < 1:
            raise DataError("n_raters must be >= 1")
        lo, hi = self.core_radius
        if not 0 < lo <= hi or 2 * hi * (1 + self.annex_radius[1]) >= self.image_size:
            raise DataError(f"core_radius {self.core_radius} does not fit a {self.image_size}px image")
        if not 0 < self.annex_radius[0] <= self.annex_radius[1]:
            raise DataError(f"annex_radius {self.annex_radius} must be positive and ordered")
        if self.noise < 0 or self.blur_sigma < 0:
            raise DataError("noise and blur_sigma must be non-negative")
        if self.split_sizes is not None and sum(self.split_sizes) != self.n_samples:
            raise DataError(f"split_sizes {self.split_sizes} do not sum to n_samples={self.n_samples}")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise DataError(f"split_fractions {self.split_fractions} must sum to 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class MultiRaterSample:
    sample_id: str
    image: np.ndarray
    masks: np.ndarray  # R×H×W uint8 in {0, 1}

    def __post_init__(self):
        if self.masks.ndim != 3 or self.masks.shape[1:] != self.image.shape:
            raise DataError(f"{self.sample_id}: masks {self.masks.shape} do not match image {self.image.shape}")

    @property
    def n_raters(self) -> int:
        return self.masks.shape[0]


@dataclass
class Dataset:
    """Immutable in spirit: arrays are shared, never modified in place."""

    ids: list[str]
    images: np.ndarray  # N×H×W float64 in [0, 1]
    masks: np.ndarray  # N×R×H×W uint8
    splits: dict[str, list[str]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {sid: i for i, sid in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise DataError("duplicate sample ids")
        check_splits(self.splits, self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[MultiRaterSample]:
        for i, sid in enumerate(self.ids):
            yield MultiRaterSample(sid, self.images[i], self.masks[i])

    @property
    def n_raters(self) -> int:
        return self.masks.shape[1]

    def subset(self, ids: Sequence[str]) -> "Dataset":
        idx = [self._index[i] for i in ids]
        return Dataset(list(ids), self.images[idx], self.masks[idx], {}, self.config, {})

    def split(self, name: str) -> "Dataset":
        if name not in self.splits:
            raise DataError(f"dataset has no {name!r} split")
        return self.subset(self.splits[name])

    def with_raters(self, k: int) -> "Dataset":
        """Keep the first ``k`` raters (index order)."""
        if not 1 <= k <= self.n_raters:
            raise DataError(f"rater subset size {k} outside [1, {self.n_raters}]")
        return Dataset(self.ids, self.images, self.masks[:, :k], self.splits, self.config, self.stats)


def check_splits(splits: dict[str, list[str]], ids: Sequence[str]) -> None:
    if not splits:
        return
    seen: set[str] = set()
    for name, members in splits.items():
        dup = seen.intersection(members)
        if dup:
            raise DataError(f"split {name!r} overlaps another split (e.g. {sorted(dup)[:3]})")
        seen.update(members)
    if seen != set(ids):
        raise DataError("splits are not exhaustive over the dataset ids")


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _disk(size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r


def _draw_geometry(cfg: SyntheticConfig, rng: np.random.Generator):
    """Core and annex-minus-core masks; resampled until the annex is large enough and in bounds."""
    n = cfg.image_size
    for _ in range(1000):
        r = rng.uniform(*cfg.core_radius)
        ra = r * rng.uniform(*cfg.annex_radius)
        theta = rng.uniform(0, 2 * np.pi)
        margin = r + ra
        cy, cx = rng.uniform(margin, n - margin, size=2) if margin < n / 2 else (n / 2, n / 2)
        ay, ax = cy + r * np.sin(theta), cx + r * np.cos(theta)
        if not (ra <= ay <= n - ra and ra <= ax <= n - ra):
            continue
        core = _disk(n, cy, cx, r)
        annex = _disk(n, ay, ax, ra) & ~core
        if core.sum() and annex.sum() >= cfg.min_annex_fraction * core.sum():
            return core, annex
    raise DataError("could not place an annex within bounds; loosen the geometry ranges")


def generate_sample(cfg: SyntheticConfig, rng: np.random.Generator, sample_id: str) -> MultiRaterSample:
    n, R = cfg.image_size, cfg.n_raters
    masks = np.zeros((R, n, n), dtype=np.uint8)
    img = np.zeros((n, n))
    if rng.random() < cfg.presence_probability:
        core, annex = _draw_geometry(cfg, rng)
        img = core * 1.0 + annex * cfg.annex_intensity
        annotates = rng.random(R) < cfg.p
        takes_annex = rng.random(R) < cfg.p
        for k in range(R):
            if annotates[k]:
                masks[k] = core | (annex & takes_annex[k])
    if cfg.blur_sigma > 0:
        img = gaussian_filter(img, cfg.blur_sigma, mode="constant")
    img = img + cfg.noise * rng.standard_normal((n, n))
    img = np.round(np.clip(img, 0.0, 1.0) * 65535.0) / 65535.0
    return MultiRaterSample(sample_id, img, masks)


def _split_counts(cfg: SyntheticConfig, n: int) -> tuple[int, int, int]:
    if cfg.split_sizes is not None:
        return cfg.split_sizes
    n_train = int(round(cfg.split_fractions[0] * n))
    n_val = int(round(cfg.split_fractions[1] * n))
    return n_train, n_val, n - n_train - n_val


def generate(cfg: SyntheticConfig) -> Dataset:
    """Draw ``n_samples`` samples with at least one non-empty mask, then split randomly.

    All-empty samples are drawn from the same stream and discarded; their count
    is recorded in ``stats["filtered_empty"]``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    kept: list[MultiRaterSample] = []
    drawn = 0
    while len(kept) < cfg.n_samples:
        s = generate_sample(cfg, rng, f"s{drawn:05d}")
        drawn += 1
        if s.masks.any():
            kept.append(s)
        if drawn > 1000 * max(cfg.n_samples, 1):
            raise DataError("generator keeps producing empty samples; raise p or presence_probability")
    ids = [s.sample_id for s in kept]
    perm = np.random.default_rng([cfg.seed, 1]).permutation(len(ids))
    n_train, n_val, _ = _split_counts(cfg, len(ids))
    shuffled = [ids[i] for i in perm]
    splits = {"train": sorted(shuffled[:n_train]), "val": sorted(shuffled[n_train:n_train + n_val]),
              "test": sorted(shuffled[n_train + n_val:])}
    ds = Dataset(ids, np.stack([s.image for s in kept]), np.stack([s.masks for s in kept]),
                 splits, cfg.to_dict(), {"drawn": drawn, "filtered_empty": drawn - len(kept)})
    return ds


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------

def write_pgm(path: Path, arr: np.ndarray, maxval: int) -> None:
    h, w = arr.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_pgm(path: Path) -> tuple[np.ndarray, int]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    dtype = ">u2" if maxval > 255 else "u1"
    nbytes = w * h * np.dtype(dtype).itemsize
    body = raw[pos:pos + nbytes]
    if len(body) != nbytes:
        raise DataError(f"{path}: expected {nbytes} raster bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(h, w), maxval


def read_mask(path: Path) -> np.ndarray:
    arr, _ = read_pgm(path)
    if not np.all((arr == 0) | (arr == 255)):
        raise DataError(f"{path}: mask values must be 0 or 255")
    return (arr == 255).astype(np.uint8)


def save(ds: Dataset, directory: str | Path) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    for k in range(ds.n_raters):
        (d / "masks" / f"rater_{k}").mkdir(parents=True, exist_ok=True)
    samples = []
    for i, sid in enumerate(ds.ids):
        img_rel = f"images/{sid}.pgm"
        write_pgm(d / img_rel, np.round(ds.images[i] * 65535.0).astype(np.uint16), 65535)
        mask_rel = []
        for k in range(ds.n_raters):
            rel = f"masks/rater_{k}/{sid}.pgm"
            write_pgm(d / rel, ds.masks[i, k].astype(np.uint8) * 255, 255)
            mask_rel.append(rel)
        samples.append({"id": sid, "image": img_rel, "masks": mask_rel})
    manifest = {"format_version": FORMAT_VERSION, "n_raters": ds.n_raters,
                "image_shape": list(ds.images.shape[1:]), "config": ds.config, "stats": ds.stats,
                "splits": ds.splits, "samples": samples}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load(directory: str | Path) -> Dataset:
    d = Path(directory)
    mpath = d / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {mpath}: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{mpath}: format version {manifest.get('format_version')} != {FORMAT_VERSION}")
    ids, images, masks = [], [], []
    for s in manifest["samples"]:
        raw, maxval = read_pgm(d / s["image"])
        if maxval != 65535:
            raise DataError(f"{d / s['image']}: expected a 16-bit image")
        ids.append(s["id"])
        images.append(raw.astype(np.float64) / 65535.0)
        masks.append(np.stack([read_mask(d / m) for m in s["masks"]]))
    splits = {k: list(v) for k, v in manifest["splits"].items()}
    return Dataset(ids, np.stack(images), np.stack(masks), splits, manifest.get("config", {}),
                   manifest.get("stats", {}))


# ---------------------------------------------------------------------------
# augmentation and normalisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    flip_h: bool = False
    flip_v: bool = False
    rot90: int = 0
    brightness: float = 0.0
    contrast: float = 1.0

    @classmethod
    def draw(cls, rng: np.random.Generator, brightness: float = 0.1, contrast: float = 0.1) -> "AugmentParams":
        return cls(bool(rng.random() < 0.5), bool(rng.random() < 0.5), int(rng.integers(4)),
                   float(rng.uniform(-brightness, brightness)), float(rng.uniform(1 - contrast, 1 + contrast)))


def apply_augmentation(image: np.ndarray, masks: np.ndarray, prm: AugmentParams) -> tuple[np.ndarray, np.ndarray]:
    """Same isometry on image and every mask; intensity changes on the image only."""
    img, m = image, masks
    if prm.flip_h:
        img, m = img[:, ::-1], m[..., :, ::-1]
    if prm.flip_v:
        img, m = img[::-1, :], m[..., ::-1, :]
    if prm.rot90:
        img, m = np.rot90(img, prm.rot90, axes=(0, 1)), np.rot90(m, prm.rot90, axes=(-2, -1))
    if prm.contrast != 1.0 or prm.brightness != 0.0:
        mu = img.mean()
        img = np.clip((img - mu) * prm.contrast + mu + prm.brightness, 0.0, 1.0)
    return np.ascontiguousarray(img), np.ascontiguousarray(m)


def augment(sample: MultiRaterSample, rng: np.random.Generator) -> MultiRaterSample:
    img, m = apply_augmentation(sample.image, sample.masks, AugmentParams.draw(rng))
    return MultiRaterSample(sample.sample_id, img, m)


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


def compute_stats(images: np.ndarray) -> NormStats:
    """Channel statistics of a (training) corpus; images are single-channel."""
    mean, std = float(np.mean(images)), float(np.std(images))
    if std == 0.0:
        raise DataError("cannot normalise: corpus has zero intensity variance")
    return NormStats(mean, std)


def normalize(image: np.ndarray, stats: NormStats) -> np.ndarray:
    if stats.std == 0.0:
        raise DataError("cannot normalise with zero std")
    return (image - stats.mean) / stats.std


# ---------------------------------------------------------------------------
# corpus statistics
# ---------------------------------------------------------------------------

def rater_agreement(masks: np.ndarray) -> np.ndarray:
    """Number of raters with a non-empty mask, per sample (N×R×H×W input)."""
    return masks.reshape(masks.shape[0], masks.shape[1], -1).any(axis=2).sum(axis=1)


def bucket_by_agreement(ds: Dataset) -> dict[int, list[str]]:
    """Sample ids keyed by rater-agreement count; key 0 collects all-empty samples."""
    counts = rater_agreement(ds.masks)
    buckets: dict[int, list[str]] = {k: [] for k in range(ds.n_raters + 1)}
    for sid, c in zip(ds.ids, counts):
        buckets[int(c)].append(sid)
    return buckets


def corpus_statistics(ds: Dataset) -> dict:
    from .metrics import label_diversity

    divs = [label_diversity(m) for m in ds.masks]
    hist = {str(k): len(v) for k, v in bucket_by_agreement(ds).items()}
    return {"n_samples": len(ds), "label_diversity_mean": float(np.mean(divs)) if divs else 0.0,
            "bucket_histogram": hist, "split_sizes": {k: len(v) for k, v in ds.splits.items()}}
