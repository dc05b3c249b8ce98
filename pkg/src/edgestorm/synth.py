"""
Synthetic scenes with exactly known edges and shape labels.

Each scene has a background (flat, linear gradient, or low-amplitude value
noise), up to three small distractor shapes, and one large primary shape
painted last. Shapes are rasterised without anti-aliasing so the boundary is
unambiguous; only the image (never the edge map) receives a sigma=0.5 blur.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from edgestorm import netpbm
from edgestorm.errors import ParseError, RejectedInput

CLASSES = ("circle", "rectangle", "triangle")
BACKGROUNDS = ("flat", "gradient", "noise")
MARGIN = 2
MIN_CONTRAST = 40


@dataclass
class Shape:
    kind: str
    cy: float
    cx: float
    size: float  # circumradius in pixels
    rotation: float
    fill: float


@dataclass
class SceneSpec:
    height: int
    width: int
    background: str
    bg_level: float
    bg_span: float
    shapes: list
    seed: tuple


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) uint8
    edges: np.ndarray  # (N, H, W) uint8 in {0, 1}
    labels: np.ndarray  # (N,) int indices into CLASSES

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        if isinstance(i, slice) or np.ndim(i):
            return Dataset(self.images[i], self.edges[i], self.labels[i])
        return self.images[i], self.edges[i], self.labels[i]

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.labels, other.labels)
        )


def _extents(extents):
    h, w = (extents, extents) if np.isscalar(extents) else extents
    if h % 16 or w % 16 or h < 16 or w < 16:
        raise RejectedInput(f"extents {h}x{w} must be positive multiples of 16")
    return int(h), int(w)


def shape_mask(shape, height, width):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dy, dx = yy - shape.cy, xx - shape.cx
    c, s = np.cos(shape.rotation), np.sin(shape.rotation)
    u, v = c * dx + s * dy, -s * dx + c * dy
    r = shape.size
    if shape.kind == "circle":
        return dx * dx + dy * dy <= r * r
    if shape.kind == "rectangle":
        # aspect fixed so the circumradius stays r
        a, b = r * 0.8, r * 0.6
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if shape.kind == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            t = shape.rotation + 2 * np.pi * k / 3
            nx, ny = np.cos(t), np.sin(t)
            # half-planes whose inscribed radius is r/2 (equilateral triangle)
            inside &= dx * nx + dy * ny <= r / 2
        return inside
    raise RejectedInput(f"unknown shape kind {shape.kind!r}")


def _pick_fill(rng, forbidden):
    for _ in range(200):
        f = rng.uniform(0, 255)
        if all(not (lo - MIN_CONTRAST < f < hi + MIN_CONTRAST) for lo, hi in forbidden):
            return f
    return None


def sample_scene(height, width, rng, seed=()):
    background = BACKGROUNDS[rng.integers(len(BACKGROUNDS))]
    span = {"flat": 0.0, "gradient": rng.uniform(10, 30), "noise": rng.uniform(6, 12)}[background]
    level = rng.uniform(20, 235 - span)
    forbidden = [(level, level + span)]
    shapes = []
    n_distract = int(rng.integers(0, 4))
    scale = min(height, width) / 64
    sizes = [scale * rng.uniform(5, 9) for _ in range(n_distract)] + [scale * rng.uniform(12, 24)]
    for size in sizes:
        fill = _pick_fill(rng, forbidden)
        if fill is None:
            break
        kind = CLASSES[rng.integers(len(CLASSES))]
        lo_y, hi_y = MARGIN + size + 1, height - 1 - MARGIN - size - 1
        lo_x, hi_x = MARGIN + size + 1, width - 1 - MARGIN - size - 1
        shapes.append(
            Shape(kind, rng.uniform(lo_y, hi_y), rng.uniform(lo_x, hi_x), size, rng.uniform(0, 2 * np.pi), fill)
        )
        forbidden.append((fill, fill))
    return SceneSpec(height, width, background, level, span, shapes, tuple(seed))


def render(spec, rng):
    """Rasterise a scene; returns (image uint8 HxWx3, edges uint8 HxW, label int)."""
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if spec.background == "flat":
        field = np.full((h, w), spec.bg_level)
    elif spec.background == "gradient":
        t = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(t) * xx / (w - 1) + np.sin(t) * yy / (h - 1)
        ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
        field = spec.bg_level + spec.bg_span * ramp
    else:
        coarse = rng.uniform(0, 1, (h // 8 + 1, w // 8 + 1))
        noise = ndimage.zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1]), order=1)[:h, :w]
        field = spec.bg_level + spec.bg_span * np.clip(noise, 0, 1)
    tint = np.zeros((h, w, 3))
    labels = np.zeros((h, w), dtype=int)
    for k, shape in enumerate(spec.shapes, start=1):
        mask = shape_mask(shape, h, w)
        field[mask] = shape.fill
        tint[mask] = rng.uniform(-10, 10, 3)
        labels[mask] = k
    image = np.clip(field[..., None] + tint, 0, 255)
    image = ndimage.gaussian_filter(image, sigma=(0.5, 0.5, 0), mode="nearest")
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    edges = boundary_of(labels)
    areas = [int(np.sum(labels == k)) for k in range(1, len(spec.shapes) + 1)]
    label = CLASSES.index(spec.shapes[int(np.argmax(areas))].kind)
    return image, edges, label


def boundary_of(labels):
    """1-px boundary: a pixel is on an edge if a 4-neighbour was painted earlier (lower label)."""
    p = np.pad(labels, 1, mode="edge")
    c = p[1:-1, 1:-1]
    lower = (p[:-2, 1:-1] < c) | (p[2:, 1:-1] < c) | (p[1:-1, :-2] < c) | (p[1:-1, 2:] < c)
    return lower.astype(np.uint8)


def generate_scene(index, extents, seed):
    h, w = _extents(extents)
    rng = np.random.default_rng([seed, index])
    spec = sample_scene(h, w, rng, (seed, index))
    return render(spec, rng)


def generate_dataset(n, extents=64, seed=0):
    if n <= 0:
        raise RejectedInput("dataset size must be positive")
    _extents(extents)
    scenes = [generate_scene(i, extents, seed) for i in range(n)]
    return Dataset(
        np.stack([s[0] for s in scenes]),
        np.stack([s[1] for s in scenes]),
        np.array([s[2] for s in scenes], dtype=int),
    )


def write_dataset(dataset, directory):
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "edges").mkdir(parents=True, exist_ok=True)
    for i, (img, edge, _) in enumerate(zip(dataset.images, dataset.edges, dataset.labels)):
        netpbm.write(d / "images" / f"{i:04d}.ppm", img)
        netpbm.write(d / "edges" / f"{i:04d}.pgm", (np.asarray(edge) > 0).astype(np.uint8) * 255)
    with open(d / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "class"])
        for i, label in enumerate(dataset.labels):
            writer.writerow([i, CLASSES[int(label)]])


def read_labels(path):
    path = Path(path)
    if not path.exists():
        raise ParseError(path, 0, "file not found")
    raw = path.read_bytes()
    lines = raw.decode().splitlines(keepends=True)
    if not lines or lines[0].strip() != "index,class":
        raise ParseError(path, 0, "header must be 'index,class'")
    out, offset = {}, len(lines[0].encode())
    for line in lines[1:]:
        parts = line.strip().split(",")
        if len(parts) != 2 or not parts[0].isdigit() or parts[1] not in CLASSES:
            raise ParseError(path, offset, f"bad label row {line.strip()!r}")
        out[int(parts[0])] = CLASSES.index(parts[1])
        offset += len(line.encode())
    return out


def read_dataset(directory):
    d = Path(directory)
    names = sorted(p.name for p in (d / "images").glob("*.ppm"))
    if not names:
        raise ParseError(d / "images", 0, "no .ppm images found")
    labels = read_labels(d / "labels.csv")
    images, edges, ys = [], [], []
    for name in names:
        stem = name[:-4]
        images.append(netpbm.read(d / "images" / name, expect="P6"))
        edge = netpbm.read(d / "edges" / f"{stem}.pgm", expect="P5")
        if edge.shape != images[-1].shape[:2]:
            raise ParseError(d / "edges" / f"{stem}.pgm", 0, "extents differ from the image")
        edges.append((edge > 127).astype(np.uint8))
        if int(stem) not in labels:
            raise ParseError(d / "labels.csv", 0, f"no label for index {int(stem)}")
        ys.append(labels[int(stem)])
    return Dataset(np.stack(images), np.stack(edges), np.array(ys, dtype=int))
