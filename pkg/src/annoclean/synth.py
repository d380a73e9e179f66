"""Annotation glyphs, random placement and alpha compositing.

Three annotation families are supported:

* body markers: an icon picked from a fixed set, stamped anywhere in the frame;
* radial lines: one to three pairs of cross markers, each pair joined by a
  dashed 1-px line;
* vascular flow: a rectangular box outline.

Everything here is a pure function of its inputs and an explicit seeded
generator, so a whole dataset can be regenerated bit-for-bit.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw
from skimage.draw import line as raster_line

from .exceptions import ConfigurationError, ShapeError, StampError
from .imageio import read_rgba


class AnnotationKind(str, enum.Enum):
    BODY_MARKER = "body_marker"
    RADIAL_LINE = "radial_line"
    VASCULAR_FLOW = "vascular_flow"

    @classmethod
    def parse(cls, value) -> "AnnotationKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"body": "body_marker", "radial": "radial_line", "vascular": "vascular_flow",
                   "cross": "radial_line", "cross_marker": "radial_line"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ConfigurationError(f"unknown annotation kind {value!r}; expected one of {names}") from None


@dataclass(frozen=True, eq=False)
class AnnotationStamp:
    """A glyph bitmap: H×W×4 float array, RGB plus straight (non-premultiplied) alpha."""

    kind: AnnotationKind
    pixels: np.ndarray
    name: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 4:
            raise StampError(f"stamp {self.name or '<unnamed>'}: expected H×W×4 pixels, got {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise StampError(f"stamp {self.name or '<unnamed>'}: values outside [0, 1]")
        if not (px[..., 3] > 0).any():
            raise StampError(f"stamp {self.name or '<unnamed>'} is fully transparent")
        object.__setattr__(self, "pixels", px)

    @property
    def nominal_size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    @property
    def support(self) -> np.ndarray:
        return self.pixels[..., 3] > 0

    @property
    def color(self) -> tuple[float, float, float]:
        """Mean colour over the opaque support."""
        rgb = self.pixels[..., :3][self.support]
        return tuple(float(c) for c in rgb.mean(axis=0))


@dataclass(frozen=True)
class Primitive:
    position: tuple[int, int]
    size: tuple[int, int]
    scale: float = 1.0
    partner: tuple[int, int] | None = None
    stamp_index: int = 0
    border: int = 0
    color: tuple[float, float, float] | None = None


@dataclass(frozen=True)
class Placement:
    kind: AnnotationKind
    elements: tuple[Primitive, ...]
    rng_seed: int


@dataclass
class Overlay:
    """Premultiplied RGBA layer and its binary support."""

    layer: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class PlacementConfig:
    radial_pair_weights: tuple[float, float, float] = (0.25, 0.5, 0.25)
    d_min: float = 16.0
    d_max: float | None = None  # None -> min(H, W) / 2
    rect_fraction: tuple[float, float] = (0.2, 0.6)
    border_widths: tuple[int, ...] = (1, 2, 3)
    palette: tuple[tuple[float, float, float], ...] = (
        (1.0, 1.0, 0.0),
        (0.0, 1.0, 1.0),
        (0.0, 1.0, 0.0),
        (1.0, 0.5, 0.0),
    )
    scale_range: tuple[float, float] = (1.0, 1.0)
    dash: tuple[int, int] = (3, 3)
    max_tries: int = 1000

    def distance_bounds(self, image_dims) -> tuple[float, float]:
        d_max = self.d_max if self.d_max is not None else min(image_dims) / 2.0
        return min(self.d_min, d_max), d_max


DEFAULT_PLACEMENT = PlacementConfig()

# --------------------------------------------------------------------------
# Built-in glyphs


def cross_glyph(size: int = 11, color=(1.0, 1.0, 0.0)) -> AnnotationStamp:
    """Hard-edged 1-px '×' glyph."""
    px = np.zeros((size, size, 4))
    idx = np.arange(size)
    for rows, cols in ((idx, idx), (idx, size - 1 - idx)):
        px[rows, cols, :3] = color
        px[rows, cols, 3] = 1.0
    return AnnotationStamp(AnnotationKind.RADIAL_LINE, px, name=f"cross_{size}")


def _icon(draw_fn, size=32, color=(0.85, 0.9, 1.0)) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    draw_fn(ImageDraw.Draw(canvas), size)
    alpha = (np.asarray(canvas) > 0).astype(np.float64)
    px = np.zeros((size, size, 4))
    px[..., :3] = np.asarray(color) * alpha[..., None]
    px[..., 3] = alpha
    return px


def _torso(d, s):
    d.ellipse([s * 0.35, 2, s * 0.65, s * 0.3], outline=255)
    d.rectangle([s * 0.25, s * 0.32, s * 0.75, s - 3], outline=255)
    d.line([s * 0.15, s * 0.6, s * 0.85, s * 0.6], fill=255, width=2)


def _breast(d, s):
    d.ellipse([3, 3, s - 4, s - 4], outline=255)
    d.ellipse([s / 2 - 2, s / 2 - 2, s / 2 + 2, s / 2 + 2], fill=255)
    d.line([s * 0.2, s * 0.25, s * 0.55, s * 0.25], fill=255, width=2)


def _head(d, s):
    d.ellipse([s * 0.2, 2, s * 0.8, s * 0.75], outline=255)
    d.rectangle([s * 0.4, s * 0.75, s * 0.6, s - 3], outline=255)
    d.line([s * 0.5, s * 0.1, s * 0.5, s * 0.45], fill=255, width=2)


def _abdomen(d, s):
    d.polygon([(s * 0.2, 3), (s * 0.8, 3), (s * 0.9, s - 4), (s * 0.1, s - 4)], outline=255)
    d.ellipse([s * 0.45, s * 0.45, s * 0.55, s * 0.55], outline=255)
    d.line([s * 0.3, s * 0.7, s * 0.7, s * 0.3], fill=255, width=2)


def _limb(d, s):
    d.rectangle([s * 0.35, 2, s * 0.65, s - 3], outline=255)
    d.line([s * 0.35, s * 0.5, s * 0.65, s * 0.5], fill=255)
    d.line([s * 0.15, s * 0.3, s * 0.85, s * 0.3], fill=255, width=2)


BODY_ICONS = {"torso": _torso, "breast": _breast, "head": _head, "abdomen": _abdomen, "limb": _limb}


def builtin_library(cross_size: int = 11, icon_size: int = 32) -> list[AnnotationStamp]:
    """Bundled silhouette body markers plus the procedural cross glyph."""
    stamps = [AnnotationStamp(AnnotationKind.BODY_MARKER, _icon(fn, icon_size), name=name)
              for name, fn in BODY_ICONS.items()]
    stamps.append(cross_glyph(cross_size))
    return stamps


def stamps_of(library: Sequence[AnnotationStamp], kind: AnnotationKind) -> list[AnnotationStamp]:
    return [s for s in library if s.kind == kind]


def load_stamp_library(path, kinds=None) -> list[AnnotationStamp]:
    """Load RGBA PNG stamps from ``<root>/{body_marker,radial_line,vascular_flow}/*.png``.

    ``kinds`` lists the annotation kinds that must be present; by default every
    kind subdirectory that exists is loaded and at least one must be non-empty.
    """
    root = Path(path)
    if not root.is_dir():
        raise ConfigurationError(f"stamp library directory not found: {root}")
    requested = [AnnotationKind.parse(k) for k in kinds] if kinds is not None else None
    stamps: list[AnnotationStamp] = []
    for kind in AnnotationKind:
        sub = root / kind.value
        files = sorted(sub.glob("*.png")) if sub.is_dir() else []
        if requested is not None and kind in requested and not files:
            raise ConfigurationError(f"stamp library {root} has no stamps for kind {kind.value!r}")
        if requested is not None and kind not in requested:
            continue
        for f in files:
            px = read_rgba(f)
            if not (px[..., 3] > 0).any():
                raise StampError(f"stamp file {f} has an all-zero alpha channel")
            stamps.append(AnnotationStamp(kind, px, name=f.name))
    if not stamps:
        raise ConfigurationError(f"stamp library {root} is empty")
    return stamps


# --------------------------------------------------------------------------
# Placement


def _as_generator(rng) -> tuple[np.random.Generator, int]:
    """Accept an integer seed or a Generator; always return the seed actually used."""
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(0, 2**63))
    elif isinstance(rng, (int, np.integer)):
        seed = int(rng)
    else:
        raise TypeError(f"rng must be an int seed or numpy Generator, got {type(rng).__name__}")
    return np.random.default_rng(seed), seed


def _uniform_topleft(gen, image_dims, size) -> tuple[int, int]:
    H, W = image_dims
    h, w = size
    return int(gen.integers(0, H - h + 1)), int(gen.integers(0, W - w + 1))


def sample_placement(kind, image_dims, stamp_dims, rng, *, n_stamps: int = 1,
                     config: PlacementConfig = DEFAULT_PLACEMENT) -> Placement:
    """Draw a random in-bounds placement for one annotation instance.

    ``stamp_dims`` is the glyph size for body markers and radial-line crosses;
    vascular-flow boxes size themselves from the image dims and ignore it.
    """
    kind = AnnotationKind.parse(kind)
    H, W = map(int, image_dims)
    gen, seed = _as_generator(rng)

    if kind is AnnotationKind.VASCULAR_FLOW:
        lo, hi = config.rect_fraction
        rh = int(round(gen.uniform(lo, hi) * H))
        rw = int(round(gen.uniform(lo, hi) * W))
        border = int(gen.choice(config.border_widths))
        rh, rw = max(rh, 2 * border), max(rw, 2 * border)
        if rh > H or rw > W:
            raise ShapeError(f"rectangle {rh}x{rw} does not fit a {H}x{W} image")
        color = tuple(float(c) for c in config.palette[int(gen.integers(len(config.palette)))])
        pos = _uniform_topleft(gen, (H, W), (rh, rw))
        return Placement(kind, (Primitive(pos, (rh, rw), border=border, color=color),), seed)

    s = float(gen.uniform(*config.scale_range)) if config.scale_range[0] != config.scale_range[1] \
        else float(config.scale_range[0])
    h, w = (max(1, int(round(d * s))) for d in stamp_dims)
    if h > H or w > W:
        raise ShapeError(f"stamp {h}x{w} is larger than image {H}x{W}")

    if kind is AnnotationKind.BODY_MARKER:
        pos = _uniform_topleft(gen, (H, W), (h, w))
        idx = int(gen.integers(n_stamps))
        return Placement(kind, (Primitive(pos, (h, w), scale=s, stamp_index=idx),), seed)

    weights = np.asarray(config.radial_pair_weights, dtype=np.float64)
    k = int(gen.choice(np.arange(1, len(weights) + 1), p=weights / weights.sum()))
    d_min, d_max = config.distance_bounds((H, W))
    elements = []
    for _ in range(k):
        idx = int(gen.integers(n_stamps))
        for _attempt in range(config.max_tries):
            p = _uniform_topleft(gen, (H, W), (h, w))
            d = gen.uniform(d_min, d_max)
            theta = gen.uniform(0.0, 2.0 * math.pi)
            q = (p[0] + int(round(d * math.sin(theta))), p[1] + int(round(d * math.cos(theta))))
            in_bounds = 0 <= q[0] <= H - h and 0 <= q[1] <= W - w
            if in_bounds and d_min <= math.dist(p, q) <= d_max:
                break
        else:
            raise ConfigurationError(
                f"could not place a cross pair with distance in [{d_min}, {d_max}] in a {H}x{W} image")
        elements.append(Primitive(p, (h, w), scale=s, partner=q, stamp_index=idx))
    return Placement(kind, tuple(elements), seed)


# --------------------------------------------------------------------------
# Rendering


def _over(layer: np.ndarray, rgba_straight: np.ndarray, top: int, left: int) -> None:
    """Source-over a straight-alpha patch onto a premultiplied layer, in place."""
    h, w = rgba_straight.shape[:2]
    dst = layer[top:top + h, left:left + w]
    a = rgba_straight[..., 3:4]
    src = np.concatenate([rgba_straight[..., :3] * a, a], axis=-1)
    dst[...] = src + (1.0 - a) * dst


def _scaled(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if pixels.shape[:2] == tuple(size):
        return pixels
    rows = (np.arange(size[0]) * pixels.shape[0] / size[0]).astype(int)
    cols = (np.arange(size[1]) * pixels.shape[1] / size[1]).astype(int)
    return pixels[rows][:, cols]


def dashed_line(p0, p1, dash=(3, 3)) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates of a 1-px dashed segment from p0 to p1 (inclusive)."""
    rr, cc = raster_line(int(p0[0]), int(p0[1]), int(p1[0]), int(p1[1]))
    on, off = dash
    keep = (np.arange(rr.size) % (on + off)) < on
    return rr[keep], cc[keep]


def rectangle_border(size, border) -> np.ndarray:
    h, w = size
    m = np.zeros((h, w), dtype=bool)
    m[:border, :] = m[h - border:, :] = True
    m[:, :border] = m[:, w - border:] = True
    return m


def _check_inside(top, left, size, image_dims):
    H, W = image_dims
    if top < 0 or left < 0 or top + size[0] > H or left + size[1] > W:
        raise ShapeError(f"primitive at ({top}, {left}) size {size} leaves the {H}x{W} image")


def render_annotation(placement: Placement, library: Sequence[AnnotationStamp], image_dims) -> Overlay:
    H, W = map(int, image_dims)
    layer = np.zeros((H, W, 4))
    kind = placement.kind

    if kind is AnnotationKind.VASCULAR_FLOW:
        for el in placement.elements:
            _check_inside(*el.position, el.size, (H, W))
            patch = np.zeros(el.size + (4,))
            ring = rectangle_border(el.size, el.border)
            patch[ring, :3] = el.color
            patch[ring, 3] = 1.0
            _over(layer, patch, *el.position)
        return Overlay(layer, (layer[..., 3] > 0).astype(np.uint8))

    stamps = stamps_of(library, kind)
    if not stamps:
        raise ConfigurationError(f"stamp library has no stamps for kind {kind.value!r}")

    for el in placement.elements:
        stamp = stamps[el.stamp_index % len(stamps)]
        glyph = _scaled(stamp.pixels, el.size)
        ends = [el.position] if el.partner is None else [el.position, el.partner]
        for top, left in ends:
            _check_inside(top, left, el.size, (H, W))
        if el.partner is not None:
            c0 = (el.position[0] + el.size[0] // 2, el.position[1] + el.size[1] // 2)
            c1 = (el.partner[0] + el.size[0] // 2, el.partner[1] + el.size[1] // 2)
            rr, cc = dashed_line(c0, c1, DEFAULT_PLACEMENT.dash)
            color = np.asarray(stamp.color)
            layer[rr, cc, :3] = color
            layer[rr, cc, 3] = 1.0
        for top, left in ends:
            _over(layer, glyph, top, left)
    return Overlay(layer, (layer[..., 3] > 0).astype(np.uint8))


def composite(clean: np.ndarray, overlay: Overlay) -> tuple[np.ndarray, np.ndarray]:
    """Blend ``overlay`` over ``clean``; returns ``(noisy, mask)``."""
    clean = np.asarray(clean, dtype=np.float64)
    if clean.shape[:2] != overlay.layer.shape[:2]:
        raise ShapeError(f"clean image {clean.shape[:2]} and overlay {overlay.layer.shape[:2]} differ in size")
    alpha = overlay.layer[..., 3:4]
    noisy = overlay.layer[..., :3] + (1.0 - alpha) * clean
    np.clip(noisy, 0.0, 1.0, out=noisy)
    return noisy, overlay.mask.copy()


@dataclass
class Annotator:
    """Convenience bundle: library + config, stamping one annotation per call."""

    kind: AnnotationKind
    library: list = field(default_factory=builtin_library)
    config: PlacementConfig = DEFAULT_PLACEMENT

    def __post_init__(self):
        self.kind = AnnotationKind.parse(self.kind)
        if self.kind is not AnnotationKind.VASCULAR_FLOW and not stamps_of(self.library, self.kind):
            raise ConfigurationError(f"stamp library has no stamps for kind {self.kind.value!r}")

    def __call__(self, clean: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray, Placement]:
        dims = clean.shape[:2]
        gen, _ = _as_generator(rng)
        stamps = stamps_of(self.library, self.kind)
        idx = int(gen.integers(len(stamps))) if stamps else 0
        stamp_dims = stamps[idx].nominal_size if stamps else (1, 1)
        placement = sample_placement(self.kind, dims, stamp_dims, gen, config=self.config)
        placement = replace(placement, elements=tuple(replace(el, stamp_index=idx) for el in placement.elements))
        noisy, mask = composite(clean, render_annotation(placement, self.library, dims))
        return noisy, mask, placement
