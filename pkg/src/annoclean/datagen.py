"""Dataset construction: noisy/noisy/clean/mask tuples, manifest, stats, splits."""
from __future__ import annotations

import enum
import hashlib
import json
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import CollisionError, ConfigurationError
from .imageio import read_mask, read_rgb, write_mask, write_rgb
from .synth import AnnotationKind, Annotator, PlacementConfig, builtin_library

MANIFEST_VERSION = "1.0"
MANIFEST_NAME = "manifest.json"
SUBDIRS = ("clean", "noisy_a", "noisy_b", "mask_a", "mask_b")
DEFAULT_FRACTIONS = {"train": 0.8, "val": 0.1, "test": 0.1}
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
EPS = 1e-6

# paper-scale dataset sizes: (clean images, noisy pairs)
PAPER_SCALE = {
    AnnotationKind.BODY_MARKER: (4975, 83900),
    AnnotationKind.RADIAL_LINE: (3936, 80000),
    AnnotationKind.VASCULAR_FLOW: (250, 80000),
}


# --------------------------------------------------------------------------
# Procedural clean images


def phantom_image(size=(64, 64), rng=None, max_level: float = 0.8) -> np.ndarray:
    """Ultrasound-like sector scan: speckled tissue in a fan, dark lesions, black margin.

    Intensities never exceed ``max_level`` so saturated annotation colours
    always differ visibly from the underlying tissue.
    """
    gen = np.random.default_rng(rng)
    H, W = size
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    apex_r, apex_c = -0.1 * H, W / 2.0
    radius = np.hypot(rows - apex_r, cols - apex_c)
    angle = np.arctan2(cols - apex_c, rows - apex_r)
    half_angle = gen.uniform(0.55, 0.75)
    fan = (np.abs(angle) <= half_angle) & (radius >= 0.2 * H) & (radius <= 1.05 * H)

    scale = min(H, W) / 64.0
    tissue = ndimage.gaussian_filter(gen.standard_normal((H, W)), 4.0 * scale)
    tissue /= tissue.std() + 1e-12
    speckle = ndimage.gaussian_filter(gen.rayleigh(1.0, (H, W)), 1.0 * scale)
    speckle /= speckle.mean()
    img = (0.45 + 0.12 * tissue) * speckle
    img *= np.exp(-0.6 * radius / H)  # depth attenuation

    for _ in range(int(gen.integers(1, 4))):
        cr, cc = gen.uniform(0.35 * H, 0.9 * H), gen.uniform(0.25 * W, 0.75 * W)
        ar, ac = gen.uniform(0.05, 0.15) * H, gen.uniform(0.05, 0.18) * W
        inside = ((rows - cr) / ar) ** 2 + ((cols - cc) / ac) ** 2 <= 1.0
        img[inside] *= gen.uniform(0.15, 0.5)

    img = np.clip(img, 0.0, 1.0) * fan
    img = np.clip(img, 0.0, max_level)
    # store-and-reload exactness: keep values on the 8-bit grid
    img = np.rint(img * 255.0) / 255.0
    return np.repeat(img[..., None], 3, axis=2)


def write_phantoms(out_dir, n: int, size=(64, 64), seed: int = 0) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(n)
    paths = []
    for i, ss in enumerate(seeds):
        p = out / f"phantom_{i:05d}.png"
        write_rgb(p, phantom_image(size, np.random.default_rng(ss)))
        paths.append(p)
    return paths


def bundled_clean_dir() -> Path:
    """Directory of the three clean phantom images shipped with the package."""
    return Path(__file__).parent / "data" / "clean"


def list_clean_images(clean_dir) -> list[Path]:
    root = Path(clean_dir)
    if not root.is_dir():
        raise ConfigurationError(f"clean image directory not found: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ConfigurationError(f"clean image directory is empty: {root}")
    return files


# --------------------------------------------------------------------------
# Statistics and normalization


def compute_channel_stats(images: Sequence[np.ndarray]) -> dict:
    """Population mean/std per channel over every pixel of every image."""
    images = list(images)
    if not images:
        raise ConfigurationError("compute_channel_stats needs at least one image")
    n = 0
    s = np.zeros(3)
    s2 = np.zeros(3)
    for img in images:
        px = np.asarray(img, dtype=np.float64).reshape(-1, 3)
        n += px.shape[0]
        s += px.sum(axis=0)
    mean = s / n
    for img in images:
        px = np.asarray(img, dtype=np.float64).reshape(-1, 3)
        s2 += ((px - mean) ** 2).sum(axis=0)
    std = np.sqrt(s2 / n)
    return {"mean": mean.tolist(), "std": std.tolist()}


class NormalizationMode(str, enum.Enum):
    LINEAR = "linear"
    SMN = "smn"

    @classmethod
    def parse(cls, value) -> "NormalizationMode":
        try:
            return cls(str(getattr(value, "value", value)).lower())
        except ValueError:
            raise ConfigurationError(f"unknown normalization {value!r}; expected 'linear' or 'smn'") from None


class ChannelNormalizer(TransformerMixin, BaseEstimator):
    """Per-channel image normalization with a fit/transform/inverse_transform API.

    ``mode='linear'`` is the identity on [0, 1] images; ``mode='smn'`` subtracts
    the channel mean and divides by ``max(std, eps)``. Statistics come either
    from ``fit`` or from a precomputed ``stats`` dict (e.g. a manifest's
    ``channel_stats``). Arrays are channel-last: (..., 3).
    """

    def __init__(self, mode="linear", stats=None, eps=EPS):
        self.mode = mode
        self.stats = stats
        self.eps = eps

    def fit(self, X, y=None):
        mode = NormalizationMode.parse(self.mode)
        if mode is NormalizationMode.LINEAR:
            self.mean_, self.scale_ = np.zeros(3), np.ones(3)
        else:
            if self.stats is None and X is None:
                raise ConfigurationError("SMN normalization needs channel stats or data to fit on")
            stats = self.stats if self.stats is not None else compute_channel_stats(np.asarray(X).reshape(-1, 1, 3))
            self.mean_ = np.asarray(stats["mean"], dtype=np.float64)
            self.scale_ = np.maximum(np.asarray(stats["std"], dtype=np.float64), self.eps)
        self.mode_ = mode
        return self

    def transform(self, X):
        check_is_fitted(self, "mode_")
        X = np.asarray(X)
        if self.mode_ is NormalizationMode.LINEAR:
            return X
        return (X - self.mean_.astype(X.dtype)) / self.scale_.astype(X.dtype)

    def inverse_transform(self, X):
        check_is_fitted(self, "mode_")
        X = np.asarray(X)
        if self.mode_ is NormalizationMode.LINEAR:
            return X
        return X * self.scale_.astype(X.dtype) + self.mean_.astype(X.dtype)


# --------------------------------------------------------------------------
# Manifest


@dataclass(frozen=True)
class Record:
    record_id: str
    clean_source: str
    clean_path: str
    noisy_a_path: str
    noisy_b_path: str
    mask_a_path: str
    mask_b_path: str
    per_record_seed: int


@dataclass
class SampleTuple:
    record_id: str
    noisy_a: np.ndarray
    noisy_b: np.ndarray
    clean: np.ndarray
    mask_a: np.ndarray
    mask_b: np.ndarray


@dataclass
class DatasetManifest:
    master_seed: int
    annotation_kind: AnnotationKind
    records: list
    channel_stats: dict
    splits: dict = field(default_factory=dict)
    split_fractions: dict = field(default_factory=dict)
    split_seed: int | None = None
    image_size: tuple | None = None
    version: str = MANIFEST_VERSION
    notes: str = ""
    root: Path | None = field(default=None, compare=False, repr=False)

    def record(self, record_id: str) -> Record:
        for r in self.records:
            if r.record_id == record_id:
                return r
        raise ConfigurationError(f"record {record_id!r} not in manifest")

    def split_records(self, name: str) -> list[Record]:
        if name not in self.splits:
            raise ConfigurationError(f"split {name!r} not in manifest; available: {sorted(self.splits)}")
        ids = set(self.splits[name])
        return [r for r in self.records if r.record_id in ids]

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "master_seed": self.master_seed,
            "annotation_kind": self.annotation_kind.value,
            "image_size": list(self.image_size) if self.image_size else None,
            "channel_stats": self.channel_stats,
            "split_fractions": self.split_fractions,
            "split_seed": self.split_seed,
            "splits": self.splits,
            "notes": self.notes,
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else Path(self.root) / MANIFEST_NAME
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_dict(cls, d: dict, root=None) -> "DatasetManifest":
        return cls(
            master_seed=int(d["master_seed"]),
            annotation_kind=AnnotationKind.parse(d["annotation_kind"]),
            records=[Record(**r) for r in d["records"]],
            channel_stats=d["channel_stats"],
            splits={k: list(v) for k, v in d.get("splits", {}).items()},
            split_fractions=d.get("split_fractions", {}),
            split_seed=d.get("split_seed"),
            image_size=tuple(d["image_size"]) if d.get("image_size") else None,
            version=d.get("version", MANIFEST_VERSION),
            notes=d.get("notes", ""),
            root=Path(root) if root is not None else None,
        )

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.is_file():
            raise ConfigurationError(f"manifest not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"manifest {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data, root=path.parent)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def derive_record_seeds(master_seed: int, n: int) -> list[int]:
    seeds = []
    for child in np.random.SeedSequence(master_seed).spawn(n):
        lo, hi = child.generate_state(2, dtype=np.uint32)
        seeds.append(int(hi) << 31 | int(lo) >> 1)  # 63-bit, JSON- and int64-safe
    if len(set(seeds)) != n:
        raise AssertionError("per-record seed collision")  # astronomically unlikely
    return seeds


def _assign_clean(n_pairs: int, n_clean: int, master_seed: int) -> list[int]:
    """Round-robin over clean images, reshuffled every pass."""
    gen = np.random.default_rng([master_seed, 0xC1EA])
    order: list[int] = []
    while len(order) < n_pairs:
        order.extend(gen.permutation(n_clean).tolist())
    return order[:n_pairs]


def _prepare_out_dir(out: Path, overwrite: bool) -> None:
    occupied = out.exists() and any(out.iterdir())
    if occupied and not overwrite:
        raise CollisionError(f"output directory {out} already exists; pass overwrite/--force to replace it")
    if occupied:
        for sub in SUBDIRS:
            shutil.rmtree(out / sub, ignore_errors=True)
        (out / MANIFEST_NAME).unlink(missing_ok=True)
    for sub in SUBDIRS:
        (out / sub).mkdir(parents=True, exist_ok=True)


def generate_record(clean: np.ndarray, annotator: Annotator, seed: int):
    """Both noisy views of one record, from one per-record seed."""
    gen = np.random.default_rng(seed)
    noisy_a, mask_a, _ = annotator(clean, gen)
    noisy_b, mask_b, _ = annotator(clean, gen)
    return noisy_a, mask_a, noisy_b, mask_b


def build_dataset(clean_dir, kind, n_pairs: int, master_seed: int, out_dir, *,
                  library=None, placement: PlacementConfig | None = None,
                  fractions=None, split_seed: int | None = None,
                  overwrite: bool = False) -> DatasetManifest:
    """Synthesize ``n_pairs`` records from the images in ``clean_dir`` and write them to ``out_dir``.

    The returned manifest is already split (default 0.8/0.1/0.1 by clean
    image) and saved as ``out_dir/manifest.json``.
    """
    kind = AnnotationKind.parse(kind)
    if int(n_pairs) < 1:
        raise ConfigurationError(f"n_pairs must be >= 1, got {n_pairs}")
    sources = list_clean_images(clean_dir)
    cleans = [read_rgb(p) for p in sources]
    sizes = {c.shape[:2] for c in cleans}
    out = Path(out_dir)
    _prepare_out_dir(out, overwrite)

    annotator = Annotator(kind, library if library is not None else builtin_library(),
                          placement or PlacementConfig())
    seeds = derive_record_seeds(int(master_seed), int(n_pairs))
    assignment = _assign_clean(int(n_pairs), len(sources), int(master_seed))
    records = []
    width = max(6, len(str(n_pairs)))
    for i, (seed, src) in enumerate(zip(seeds, assignment)):
        rid = f"{i:0{width}d}"
        clean = cleans[src]
        noisy_a, mask_a, noisy_b, mask_b = generate_record(clean, annotator, seed)
        rel = {sub: f"{sub}/{rid}.png" for sub in SUBDIRS}
        write_rgb(out / rel["clean"], clean)
        write_rgb(out / rel["noisy_a"], noisy_a)
        write_rgb(out / rel["noisy_b"], noisy_b)
        write_mask(out / rel["mask_a"], mask_a)
        write_mask(out / rel["mask_b"], mask_b)
        records.append(Record(rid, sources[src].name, rel["clean"], rel["noisy_a"], rel["noisy_b"],
                              rel["mask_a"], rel["mask_b"], seed))

    manifest = DatasetManifest(
        master_seed=int(master_seed),
        annotation_kind=kind,
        records=records,
        channel_stats=compute_channel_stats(cleans),
        image_size=next(iter(sizes)) if len(sizes) == 1 else None,
        notes="split fractions default to 0.8/0.1/0.1 (not given by the source study)",
        root=out,
    )
    manifest = split(manifest, fractions or DEFAULT_FRACTIONS,
                     seed=int(master_seed) if split_seed is None else int(split_seed))
    manifest.save()
    return manifest


def load_sample(manifest: DatasetManifest, record_id: str, normalization="linear") -> SampleTuple:
    """Read one record; images pass through ``normalization`` (a mode name or a fitted ChannelNormalizer)."""
    rec = manifest.record(record_id)
    root = Path(manifest.root or ".")
    if isinstance(normalization, ChannelNormalizer):
        norm = normalization
    else:
        norm = ChannelNormalizer(NormalizationMode.parse(normalization), stats=manifest.channel_stats).fit(None)

    def path(rel):
        p = root / rel
        if not p.is_file():
            raise ConfigurationError(f"record {record_id}: missing file {p}")
        return p

    return SampleTuple(
        record_id=record_id,
        noisy_a=norm.transform(read_rgb(path(rec.noisy_a_path))),
        noisy_b=norm.transform(read_rgb(path(rec.noisy_b_path))),
        clean=norm.transform(read_rgb(path(rec.clean_path))),
        mask_a=read_mask(path(rec.mask_a_path)),
        mask_b=read_mask(path(rec.mask_b_path)),
    )


def _largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    raw = [f * total for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    short = total - sum(counts)
    # ties broken by position, so train > val > test on equal remainders
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def split(manifest: DatasetManifest, fractions=None, seed: int = 0) -> DatasetManifest:
    """Partition records into splits by clean image, so no source leaks across splits."""
    fractions = dict(fractions or DEFAULT_FRACTIONS)
    if any(f < 0 for f in fractions.values()) or abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    groups: dict[str, list[str]] = {}
    for r in manifest.records:
        groups.setdefault(r.clean_source, []).append(r.record_id)
    names = sorted(groups)
    perm = np.random.default_rng(seed).permutation(len(names))
    counts = _largest_remainder(len(names), list(fractions.values()))
    splits, start = {}, 0
    for split_name, count in zip(fractions, counts):
        chosen = {names[i] for i in perm[start:start + count]}
        start += count
        splits[split_name] = [r.record_id for r in manifest.records if r.clean_source in chosen]
    return replace(manifest, splits=splits, split_fractions=fractions, split_seed=int(seed))


def tree_digest(root) -> str:
    """SHA-256 over relative paths and contents of every file under ``root``."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(b"\0")
            h.update(p.read_bytes())
    return h.hexdigest()
