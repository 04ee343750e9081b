"""Deterministic synthetic place-data generator.

Each place renders a seeded procedural canvas (oriented gradients, random
rectangles, periodic textures); its images are random crops of that canvas
(viewpoint variation: translation up to 25% of the crop, scale 0.9-1.1),
each followed by a random photometric condition transform. Geotags put
places far apart (100 m grid) with small per-image jitter, so the 25 m
ground-truth rule is unambiguous.

Image files are raw planar float32: an 8-byte header (u32 height, u32
width, little-endian) followed by 3*H*W float32 samples in [0, 1]. No codec
involved, so generation is bit-exact across runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadCheckpoint, CanvasTooSmall, ConfigError
from .retrieval import PlaceRecord, write_manifest

PLACE_SPACING = 100.0   # meters between place centers, >= 2x the 25 m rule
GEO_JITTER = 3.0        # per-image jitter, small against the threshold
CONDITION_KINDS = ("brightness", "contrast", "channel-tint", "noise")


@dataclass(frozen=True)
class SyntheticPlaceSpec:
    place_id: int
    seed: int
    geotag: tuple[float, float]
    canvas: int

    def __post_init__(self):
        if self.canvas < 8:
            raise CanvasTooSmall(f"canvas {self.canvas} too small to render")


@dataclass(frozen=True)
class ConditionTransform:
    kind: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in CONDITION_KINDS:
            raise ConfigError(f"unknown condition transform {self.kind!r}")
        if not 0.0 <= self.magnitude <= 1.0:
            raise ConfigError(f"magnitude {self.magnitude} outside [0, 1]")


def apply_condition_transform(image: np.ndarray, t: ConditionTransform,
                              rng: np.random.Generator) -> np.ndarray:
    """Photometric perturbation, clamped back to [0, 1]; magnitude 0 is the
    identity. Noise deviates each pixel by at most 3x the magnitude."""
    img = image.astype(np.float64)
    m = t.magnitude
    if t.kind == "brightness":
        img = img + m * rng.uniform(-0.5, 0.5)
    elif t.kind == "contrast":
        mean = img.mean()
        img = mean + (img - mean) * (1.0 + m * rng.uniform(-0.8, 0.8))
    elif t.kind == "channel-tint":
        img = img * (1.0 + m * rng.uniform(-0.5, 0.5, size=(3, 1, 1)))
    elif t.kind == "noise":
        img = img + m * np.clip(rng.normal(0.0, 1.0, img.shape), -3.0, 3.0)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_canvas(spec: SyntheticPlaceSpec) -> np.ndarray:
    """Seeded mixture of oriented gradients, periodic textures and opaque
    rectangles; (3, canvas, canvas) float32 in [0, 1]. The pattern lives at
    low spatial frequency (< 12 cycles per canvas)."""
    rng = np.random.default_rng([spec.seed, spec.place_id, 0xCA])
    c = spec.canvas
    yy, xx = np.mgrid[0:c, 0:c].astype(np.float64) / c
    img = np.zeros((3, c, c))

    # oriented gradient per channel
    for ch in range(3):
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * xx + np.sin(theta) * yy
        img[ch] += rng.uniform(0.3, 1.0) * (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)

    # periodic textures
    for _ in range(rng.integers(2, 5)):
        fx, fy = rng.uniform(2.0, 12.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 * (1.0 + np.sin(2 * np.pi * (fx * xx + fy * yy) + phase))
        weights = rng.uniform(0.0, 0.8, size=(3, 1, 1))
        img += weights * wave

    # opaque rectangles
    for _ in range(rng.integers(5, 11)):
        h = int(rng.integers(c // 10, c // 2))
        w = int(rng.integers(c // 10, c // 2))
        r0 = int(rng.integers(0, c - h))
        c0 = int(rng.integers(0, c - w))
        color = rng.uniform(0.0, 1.0, size=(3, 1, 1))
        alpha = rng.uniform(0.5, 1.0)
        img[:, r0:r0 + h, c0:c0 + w] *= (1.0 - alpha)
        img[:, r0:r0 + h, c0:c0 + w] += alpha * color

    img -= img.min()
    img /= max(img.max(), 1e-9)
    return img.astype(np.float32)


def _bilinear_resize(src: np.ndarray, size: int) -> np.ndarray:
    """(3, h, w) -> (3, size, size), align-corners=False convention."""
    _, h, w = src.shape
    if h == size and w == size:
        return src.copy()
    ys = np.clip((np.arange(size) + 0.5) * h / size - 0.5, 0, h - 1)
    xs = np.clip((np.arange(size) + 0.5) * w / size - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = src[:, y0][:, :, x0] * (1 - wx) + src[:, y0][:, :, x1] * wx
    bot = src[:, y1][:, :, x0] * (1 - wx) + src[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(src.dtype)


def _clutter(size: int, rng: np.random.Generator) -> np.ndarray:
    """Per-image high-frequency interference (wavelength 2-4 px), mean zero.

    Place patterns live at low spatial frequency, so this clutter destroys
    raw-pixel similarity while remaining separable for learned local filters.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((3, size, size))
    for _ in range(3):
        freq = rng.uniform(0.25, 0.5)
        theta = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        out += rng.uniform(0.05, 0.15, size=(3, 1, 1)) * wave
    return out


def gen_place(spec: SyntheticPlaceSpec, k: int, crop: int,
              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """K views of one place: random crops plus condition transforms.

    Returns (images (k, 3, crop, crop) float32, per-image geotags (k, 2)).
    """
    if k < 1:
        raise ConfigError("need at least one image per place")
    max_window = int(round(crop * 1.1))
    if spec.canvas < max_window + int(0.5 * crop):
        raise CanvasTooSmall(
            f"canvas {spec.canvas} cannot host a {max_window} px window with 25% translation"
        )
    canvas = render_canvas(spec)
    images = np.empty((k, 3, crop, crop), dtype=np.float32)
    geotags = np.empty((k, 2), dtype=np.float64)
    for i in range(k):
        scale = rng.uniform(0.9, 1.1)
        window = int(round(crop * scale))
        base = (spec.canvas - window) // 2
        tx = int(round(rng.uniform(-0.25, 0.25) * crop))
        ty = int(round(rng.uniform(-0.25, 0.25) * crop))
        r0 = int(np.clip(base + ty, 0, spec.canvas - window))
        c0 = int(np.clip(base + tx, 0, spec.canvas - window))
        view = _bilinear_resize(canvas[:, r0:r0 + window, c0:c0 + window], crop)
        view = np.clip(view + _clutter(crop, rng), 0.0, 1.0).astype(np.float32)
        # one random photometric perturbation per view; ranges tuned per kind
        # (noise at high magnitude would bury the pattern entirely)
        kind = CONDITION_KINDS[rng.integers(0, len(CONDITION_KINDS))]
        lo, hi = (0.1, 0.3) if kind == "noise" else (0.5, 1.0)
        t = ConditionTransform(kind, float(rng.uniform(lo, hi)))
        images[i] = apply_condition_transform(view, t, rng)
        geotags[i] = (spec.geotag[0] + rng.uniform(-GEO_JITTER, GEO_JITTER),
                      spec.geotag[1] + rng.uniform(-GEO_JITTER, GEO_JITTER))
    return images, geotags


# ---------------------------------------------------------------------------
# raw image files
# ---------------------------------------------------------------------------

def write_image(path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype="<f4")
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigError(f"expected (3, H, W) image, got {image.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", image.shape[1], image.shape[2]))
        fh.write(image.tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise BadCheckpoint(f"{path}: truncated image header")
        h, w = struct.unpack("<II", head)
        data = np.frombuffer(fh.read(3 * h * w * 4), dtype="<f4")
        if data.size != 3 * h * w:
            raise BadCheckpoint(f"{path}: truncated image data")
    return data.reshape(3, h, w).copy()


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def gen_dataset(out_dir, num_places: int, k: int, seed: int,
                crop: int = 64, canvas: int = 128) -> dict:
    """Write images, manifests and the query/db split.

    Image 0 of each place is the query; the remaining k-1 are database
    images (which also serve as the training set). Also writes per-role
    manifests so extraction can run on queries and database separately.
    """
    if num_places < 4:
        raise ConfigError(f"need at least 4 places, got {num_places}")
    if k < 2:
        raise ConfigError("need at least 2 images per place (1 query + 1 database)")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    grid = int(np.ceil(np.sqrt(num_places)))
    records: list[PlaceRecord] = []
    roles: list[str] = []
    for pid in range(num_places):
        spec = SyntheticPlaceSpec(
            place_id=pid,
            seed=seed,
            geotag=(PLACE_SPACING * (pid % grid), PLACE_SPACING * (pid // grid)),
            canvas=canvas,
        )
        rng = np.random.default_rng([seed, pid, 0x1D])
        images, geotags = gen_place(spec, k, crop, rng)
        for i in range(k):
            rel = f"images/place{pid:04d}_im{i}.img"
            write_image(out / rel, images[i])
            records.append(PlaceRecord(path=rel, place_id=pid,
                                       geotag=(geotags[i, 0], geotags[i, 1])))
            roles.append("query" if i == 0 else "db")
    write_manifest(out / "manifest.txt", records)
    write_manifest(out / "manifest_query.txt",
                   [r for r, role in zip(records, roles) if role == "query"])
    write_manifest(out / "manifest_db.txt",
                   [r for r, role in zip(records, roles) if role == "db"])
    with open(out / "split.txt", "w", encoding="utf-8") as fh:
        for record, role in zip(records, roles):
            fh.write(f"{record.path} {role}\n")
    return {
        "places": num_places,
        "images": len(records),
        "queries": roles.count("query"),
        "database": roles.count("db"),
    }


def read_split(path) -> dict[str, str]:
    split = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            image_id, role = line.split()
            split[image_id] = role
    return split


def load_images(base_dir, records) -> np.ndarray:
    base = Path(base_dir)
    return np.stack([read_image(base / r.path) for r in records])
