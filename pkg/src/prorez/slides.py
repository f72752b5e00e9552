"""Synthetic slides, annotation polygons, tiling, Lanczos downsampling and patch manifests.

Each synthetic class combines a coarse plane wave (survives heavy
downsampling) with a fine plane wave (visible at full and half resolution,
removed by the quarter-resolution antialiasing filter):

====  =================  =================
cls   coarse wave        fine wave
====  =================  =================
0     vertical, 128 px   vertical, ~5 px
1     vertical, 128 px   horizontal, ~5 px
2     horizontal, 64 px  vertical, ~5 px
3     horizontal, 64 px  horizontal, ~5 px
4     diagonal, ~45 px   vertical, ~5 px
====  =================  =================

So classes 0/1 and 2/3 differ only in fine texture, 0/2 only in coarse.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .seeding import derive_seed

NUM_CLASSES = 5
CLASS_NAMES = ("HGSOC", "CCOC", "ENOC", "LGSOC", "MUC")

# (kx, ky) in cycles per slide side, for a 1024 px reference slide
COARSE_WAVES = ((8, 0), (0, 16), (16, 16))
FINE_FREQ = 0.16  # cycles per pixel
CLASS_RECIPES = ((0, 0), (0, 1), (1, 0), (1, 1), (2, 0))  # (coarse index, fine orientation)
PROXY_WAVES = ((12, 0), (0, 12), (12, 12), (12, -12))

BACKGROUND = 0.85


@dataclass
class SlideImage:
    pixels: np.ndarray
    slide_id: str
    patient_id: str
    class_label: int

    @property
    def side(self) -> int:
        return self.pixels.shape[-1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else self.pixels.shape[0]


@dataclass
class AnnotationPolygon:
    vertices: list[tuple[float, float]]

    def area(self) -> float:
        v = np.asarray(self.vertices, dtype=float)
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def validate(self) -> "AnnotationPolygon":
        v = self.vertices
        if len(v) < 3:
            raise ValidationError(f"polygon needs >= 3 vertices, got {len(v)}")
        if not self.area() > 0:
            raise ValidationError("polygon has zero area")
        if not _is_simple(np.asarray(v, dtype=float)):
            raise ValidationError("polygon is self-intersecting")
        return self

    def shifted(self, dx: float, dy: float) -> "AnnotationPolygon":
        return AnnotationPolygon([(x + dx, y + dy) for x, y in self.vertices])


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    if d1 * d2 < 0 and d3 * d4 < 0:
        return True

    def on_segment(a, b, c):
        return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
                and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    return ((d1 == 0 and on_segment(q1, q2, p1)) or (d2 == 0 and on_segment(q1, q2, p2))
            or (d3 == 0 and on_segment(p1, p2, q1)) or (d4 == 0 and on_segment(p1, p2, q2)))


def _is_simple(v: np.ndarray) -> bool:
    n = len(v)
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]):
                return False
    return True


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

def _plane_wave(side, kx, ky, phase, per_pixel=False):
    coords = np.arange(side, dtype=np.float64)
    scale = 1.0 if per_pixel else 1.0 / side
    arg = 2 * np.pi * (kx * scale * coords[None, :] + ky * scale * coords[:, None]) + phase
    return np.cos(arg)


def _star_polygon(rng, side, lo=0.42, hi=0.62, n=12) -> AnnotationPolygon:
    while True:
        target = rng.uniform(lo, hi)
        cx, cy = side * (0.5 + rng.uniform(-0.04, 0.04, size=2))
        angles = 2 * np.pi * (np.arange(n) + rng.uniform(-0.3, 0.3, size=n)) / n
        radii = 1 + rng.uniform(-0.15, 0.15, size=n)
        unit = AnnotationPolygon(list(zip(radii * np.cos(angles), radii * np.sin(angles))))
        r = np.sqrt(target * side * side / unit.area())
        xs = np.clip(cx + r * radii * np.cos(angles), 0, side)
        ys = np.clip(cy + r * radii * np.sin(angles), 0, side)
        poly = AnnotationPolygon([(round(float(x), 3), round(float(y), 3)) for x, y in zip(xs, ys)])
        if 0.4 * side * side <= poly.area() <= 0.8 * side * side:
            return poly


def _tissue(rng, side, coarse, fine_orientation, patient):
    base, coarse_amp, fine_amp = patient
    kx, ky = (k * side / 1024 for k in coarse)
    img = base + coarse_amp * _plane_wave(side, kx, ky, rng.uniform(0, 2 * np.pi))
    if fine_orientation is not None:
        fx, fy = (FINE_FREQ, 0.0) if fine_orientation == 0 else (0.0, FINE_FREQ)
        img += fine_amp * _plane_wave(side, fx, fy, rng.uniform(0, 2 * np.pi), per_pixel=True)
    return img


def generate_synthetic_slide(class_id: int, patient_seed: int, side: int, slide_index: int = 0,
                             tile: int = 128, slide_id: str | None = None,
                             patient_id: str | None = None) -> tuple[SlideImage, AnnotationPolygon]:
    """One grayscale slide in [0, 1] plus its tumor annotation.

    Patient-level traits (brightness, wave amplitudes) come from
    ``patient_seed``; phases, annotation shape and noise from
    ``(patient_seed, slide_index)``.
    """
    if not 0 <= class_id < NUM_CLASSES:
        raise ValidationError(f"class_id must be in [0, {NUM_CLASSES}), got {class_id}")
    if side < 8 * tile or side % tile:
        raise ValidationError(f"slide side {side} must be a multiple of tile {tile} and >= 8 tiles")
    prng = np.random.default_rng(derive_seed("patient", patient_seed))
    patient = (prng.uniform(0.42, 0.52), prng.uniform(0.14, 0.20), prng.uniform(0.10, 0.14))
    rng = np.random.default_rng(derive_seed("slide", patient_seed, slide_index))
    coarse_idx, fine = CLASS_RECIPES[class_id]
    polygon = _star_polygon(rng, side)
    tissue = _tissue(rng, side, COARSE_WAVES[coarse_idx], fine, patient)
    inside = rasterize_polygon(polygon, side)
    img = np.where(inside, tissue, BACKGROUND)
    img += rng.normal(0.0, 0.04, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    pid = patient_id or f"patient-{patient_seed}"
    sid = slide_id or f"{pid}-s{slide_index}"
    return SlideImage(img, sid, pid, class_id), polygon


def generate_proxy_slide(class_id: int, seed: int, side: int, slide_id: str | None = None):
    """Slide for the pretraining proxy task: four coarse orientations, no fine texture."""
    if not 0 <= class_id < len(PROXY_WAVES):
        raise ValidationError(f"proxy class must be in [0, {len(PROXY_WAVES)}), got {class_id}")
    rng = np.random.default_rng(derive_seed("proxy", seed))
    patient = (rng.uniform(0.35, 0.6), rng.uniform(0.12, 0.22), 0.0)
    polygon = _star_polygon(rng, side)
    img = np.where(rasterize_polygon(polygon, side),
                   _tissue(rng, side, PROXY_WAVES[class_id], None, patient), BACKGROUND)
    img += rng.normal(0.0, 0.05, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    sid = slide_id or f"proxy-{seed}"
    return SlideImage(img, sid, sid, class_id), polygon


# ---------------------------------------------------------------------------
# Lanczos resampling
# ---------------------------------------------------------------------------

def lanczos_kernel(x, a: int = 3):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < a, np.sinc(x) * np.sinc(x / a), 0.0)


def lanczos_matrix(in_size: int, out_size: int, a: int = 3) -> np.ndarray:
    """(out, in) resampling matrix: antialiased, renormalized rows, clamped edges."""
    if a < 1:
        raise ValidationError(f"Lanczos order must be >= 1, got {a}")
    if out_size > in_size:
        raise ValidationError(f"unsupported direction: upscaling {in_size} -> {out_size}")
    if out_size < 1 or in_size % out_size:
        raise ValidationError(f"downscale {in_size} -> {out_size} is not an integer factor")
    f = in_size // out_size
    W = np.zeros((out_size, in_size))
    for i in range(out_size):
        center = (i + 0.5) * f - 0.5
        j = np.arange(int(np.floor(center - a * f)) + 1, int(np.ceil(center + a * f)))
        w = lanczos_kernel((j - center) / f, a)
        w /= w.sum()
        np.add.at(W[i], np.clip(j, 0, in_size - 1), w)
    return W


def lanczos_resize(img: np.ndarray, out_side: int, a: int = 3) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return np.stack([lanczos_resize(p, out_side, a) for p in img])
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValidationError(f"expected a square 2-D image, got shape {img.shape}")
    W = lanczos_matrix(img.shape[0], out_side, a)
    return W @ img @ W.T


# ---------------------------------------------------------------------------
# Tiling
# ---------------------------------------------------------------------------

def rasterize_polygon(polygon: AnnotationPolygon, side: int) -> np.ndarray:
    """Boolean (side, side) mask of pixels whose centers fall inside (even-odd rule)."""
    v = np.asarray(polygon.vertices, dtype=np.float64)
    x0, y0 = v[:, 0], v[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    yc = np.arange(side) + 0.5
    Y = yc[None, :]
    crosses = ((y0[:, None] <= Y) & (Y < y1[:, None])) | ((y1[:, None] <= Y) & (Y < y0[:, None]))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (Y - y0[:, None]) / (y1 - y0)[:, None]
    xs = np.where(crosses, x0[:, None] + t * (x1 - x0)[:, None], np.inf)
    xs.sort(axis=0)
    diff = np.zeros((side, side + 1), dtype=np.int32)
    rows = np.arange(side)
    for k in range(0, xs.shape[0] - 1, 2):
        a, b = xs[k], xs[k + 1]
        ok = np.isfinite(b)
        start = np.clip(np.ceil(a[ok] - 0.5), 0, side).astype(int)
        stop = np.clip(np.ceil(b[ok] - 0.5), 0, side).astype(int)
        np.add.at(diff, (rows[ok], start), 1)
        np.add.at(diff, (rows[ok], stop), -1)
    return np.cumsum(diff, axis=1)[:, :side] > 0


def tile_annotated_region(slide: SlideImage, polygon: AnnotationPolygon, tile: int,
                          stride: int | None = None):
    """Non-overlapping tiles with at least half their pixels inside the polygon.

    Returns ``[((x, y), pixels), ...]`` in row-major origin order.
    """
    stride = tile if stride is None else stride
    if stride != tile:
        raise ValidationError(f"only non-overlapping tiling is supported (stride {stride} != tile {tile})")
    side = slide.side
    if tile > side or side % tile:
        raise ValidationError(f"tile {tile} must divide slide side {side}")
    polygon.validate()
    mask = rasterize_polygon(polygon, side)
    g = side // tile
    counts = mask.reshape(g, tile, g, tile).sum(axis=(1, 3))
    out = []
    for gy, gx in zip(*np.nonzero(2 * counts >= tile * tile)):
        x, y = int(gx) * tile, int(gy) * tile
        out.append(((x, y), slide.pixels[..., y:y + tile, x:x + tile]))
    return out


# ---------------------------------------------------------------------------
# Image files and manifests
# ---------------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pnm(path, img: np.ndarray) -> None:
    """Binary PGM (2-D) or PPM (3, h, w) from floats in [0, 1] or uint8."""
    data = img if img.dtype == np.uint8 else to_uint8(img)
    if data.ndim == 2:
        header, payload = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n", data
    elif data.ndim == 3 and data.shape[0] == 3:
        header, payload = f"P6\n{data.shape[2]} {data.shape[1]}\n255\n", data.transpose(1, 2, 0)
    else:
        raise ValidationError(f"cannot write image of shape {data.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_bytes(header.encode("ascii") + np.ascontiguousarray(payload).tobytes())
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def read_pnm(path) -> np.ndarray:
    """uint8 array, (h, w) for P5 or (3, h, w) for P6."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end].decode("ascii"))
        pos = end
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255 or magic not in ("P5", "P6"):
        raise ValidationError(f"{path}: unsupported image ({magic}, maxval {maxval})")
    planes = 1 if magic == "P5" else 3
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * planes, offset=pos)
    return data.reshape(h, w) if planes == 1 else data.reshape(h, w, 3).transpose(2, 0, 1)


@dataclass
class PatchRecord:
    slide_id: str
    patient_id: str
    class_label: int
    x: int
    y: int
    paths: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(", ", ": "))

    @classmethod
    def from_json(cls, line: str) -> "PatchRecord":
        d = json.loads(line)
        return cls(d["slide_id"], d["patient_id"], int(d["class_label"]), int(d["x"]), int(d["y"]),
                   {str(k): v for k, v in d["paths"].items()})

    @property
    def key(self) -> tuple:
        return (self.patient_id, self.slide_id, self.y, self.x)


def write_manifest(records: Iterable[PatchRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    recs = sorted(records, key=lambda r: r.key)
    path.write_text("".join(r.to_json() + "\n" for r in recs), encoding="utf-8")
    return path


def read_manifest(path) -> list[PatchRecord]:
    with open(path, encoding="utf-8") as fh:
        return [PatchRecord.from_json(line) for line in fh if line.strip()]


def _tile_slide(slide, polygon, tile, levels, out_dir: Path, manifest_dir: Path):
    records = []
    for (x, y), pix in tile_annotated_region(slide, polygon, tile):
        paths = {}
        for level in levels:
            img = pix if level == 1 else lanczos_resize(pix, tile // level)
            fname = out_dir / "patches" / slide.slide_id / f"x{x:05d}_y{y:05d}_L{level}.pgm"
            write_pnm(fname, img)
            paths[str(level)] = os.path.relpath(fname, manifest_dir)
        records.append(PatchRecord(slide.slide_id, slide.patient_id, slide.class_label, x, y, paths))
    return records


def build_manifest(slides: Sequence[tuple[SlideImage, AnnotationPolygon]], tile: int,
                   levels: Sequence[int], out_dir, manifest_path=None,
                   threads: int = 1) -> list[PatchRecord]:
    """Tile every slide, save each tile at every downscale level, write the manifest.

    Level ``k`` files are ``tile // k`` pixels square. Paths in the manifest
    are relative to the manifest's directory.
    """
    out_dir = Path(out_dir)
    manifest_path = Path(manifest_path) if manifest_path else out_dir / "manifest.jsonl"
    manifest_dir = manifest_path.parent
    manifest_dir.mkdir(parents=True, exist_ok=True)
    levels = sorted(set(int(l) for l in levels))
    for level in levels:
        if level < 1 or tile % level:
            raise ValidationError(f"level {level} must be a positive divisor of tile {tile}")
    jobs = [(s, p, tile, levels, out_dir, manifest_dir) for s, p in slides]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda j: _tile_slide(*j), jobs))
    else:
        parts = [_tile_slide(*j) for j in jobs]
    records = sorted((r for part in parts for r in part), key=lambda r: r.key)
    seen = set()
    for r in records:
        if (r.slide_id, r.x, r.y) in seen:
            raise ValidationError(f"duplicate patch {r.slide_id} at ({r.x}, {r.y})")
        seen.add((r.slide_id, r.x, r.y))
    write_manifest(records, manifest_path)
    return records


def load_patch_array(records: Sequence[PatchRecord], level: int, manifest_dir) -> np.ndarray:
    """Stack the patches at one level as float32 (n, channels, s, s) in [0, 1]."""
    manifest_dir = Path(manifest_dir)
    key = str(level)
    imgs = []
    for r in records:
        if key not in r.paths:
            raise ValidationError(f"patch {r.slide_id}@({r.x},{r.y}) has no level {level} file")
        img = read_pnm(manifest_dir / r.paths[key])
        imgs.append(img[None] if img.ndim == 2 else img)
    if not imgs:
        return np.zeros((0, 1, 0, 0), dtype=np.float32)
    return np.stack(imgs).astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------------------
# Cohorts
# ---------------------------------------------------------------------------

@dataclass
class SlideEntry:
    slide_id: str
    patient_id: str
    class_label: int
    path: str
    polygon: list

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def synth_cohort(patients_per_class: int, slides_per_patient: int, side: int, seed: int,
                 tile: int = 128):
    """Slides for ``5 * patients_per_class`` patients, interleaved by class."""
    out = []
    for i in range(patients_per_class * NUM_CLASSES):
        cls = i % NUM_CLASSES
        pid = f"P{i:04d}"
        pseed = derive_seed(seed, "patient", i)
        for k in range(slides_per_patient):
            out.append(generate_synthetic_slide(cls, pseed, side, slide_index=k, tile=tile,
                                                slide_id=f"{pid}-S{k}", patient_id=pid))
    return out


def proxy_cohort(slides_per_class: int, side: int, seed: int, n_classes: int = len(PROXY_WAVES)):
    return [generate_proxy_slide(c, derive_seed(seed, "proxy", c, k), side, slide_id=f"X{c}-{k:03d}")
            for k in range(slides_per_class) for c in range(n_classes)]


def save_slides(slides, directory, index_path) -> list[SlideEntry]:
    directory = Path(directory)
    index_path = Path(index_path)
    entries = []
    for s, poly in slides:
        path = directory / f"{s.slide_id}.pgm"
        write_pnm(path, s.pixels)
        entries.append(SlideEntry(s.slide_id, s.patient_id, s.class_label,
                                  os.path.relpath(path, index_path.parent),
                                  [list(v) for v in poly.vertices]))
    index_path.parent.mkdir(parents=True, exist_ok=True)
    index_path.write_text("".join(e.to_json() + "\n" for e in entries), encoding="utf-8")
    return entries


def load_slides(index_path):
    index_path = Path(index_path)
    out = []
    for line in index_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        pixels = read_pnm(index_path.parent / d["path"]).astype(np.float64) / 255.0
        out.append((SlideImage(pixels, d["slide_id"], d["patient_id"], int(d["class_label"])),
                    AnnotationPolygon([tuple(v) for v in d["polygon"]])))
    return out
