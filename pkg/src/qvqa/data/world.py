"""Synthetic ultrasound-like scenes and their two-view image rendering."""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass

import numpy as np

ORGANS = ("breast", "thyroid")
TEXTURES = ("smooth", "coarse")
QUADRANTS = ("upper-outer", "upper-inner", "lower-outer", "lower-inner")
SIZE_RANGE = (2, 20)
THICKNESS_RANGE = (4, 15)

IMAGE_SIZE = 64
BACKGROUND = 0.45
BAND_GAIN = 0.25
TRACHEA_DROP = 0.2
TEXTURE_AMPLITUDE = 0.06
LINE_DROP = 0.2
NODULE_LEVEL = 0.1
NOISE_STD = 0.005
JITTER = 1


@dataclass(frozen=True)
class Scene:
    """Ground truth for one study: the report and both images derive from it."""

    id: str
    organ: str
    nodule_present: bool
    quadrant: str | None
    size_units: int | None
    echo_texture: str
    thickness_units: int
    secondary_abnormal: bool

    def __post_init__(self):
        if self.organ not in ORGANS:
            raise ValueError(f"unknown organ {self.organ!r}")
        if self.echo_texture not in TEXTURES:
            raise ValueError(f"unknown echo texture {self.echo_texture!r}")
        if self.nodule_present:
            if self.quadrant not in QUADRANTS:
                raise ValueError(f"nodule needs a quadrant from {QUADRANTS}, got {self.quadrant!r}")
            if self.size_units is None or not SIZE_RANGE[0] <= self.size_units <= SIZE_RANGE[1]:
                raise ValueError(f"nodule size {self.size_units} outside {SIZE_RANGE}")
        elif self.quadrant is not None or self.size_units is not None:
            raise ValueError("quadrant/size must be empty when no nodule is present")
        if not THICKNESS_RANGE[0] <= self.thickness_units <= THICKNESS_RANGE[1]:
            raise ValueError(f"thickness {self.thickness_units} outside {THICKNESS_RANGE}")

    def labels(self):
        d = asdict(self)
        return {
            "nodule_present": d["nodule_present"],
            "quadrant": d["quadrant"],
            "size_units": d["size_units"],
            "echo_texture": d["echo_texture"],
            "thickness_units": d["thickness_units"],
            "secondary_abnormal": d["secondary_abnormal"],
        }

    @classmethod
    def from_record(cls, record):
        lab = record["labels"]
        return cls(
            id=record["id"],
            organ=record["organ"],
            nodule_present=bool(lab["nodule_present"]),
            quadrant=lab["quadrant"],
            size_units=lab["size_units"],
            echo_texture=lab["echo_texture"],
            thickness_units=int(lab["thickness_units"]),
            secondary_abnormal=bool(lab["secondary_abnormal"]),
        )


def scene_rng(seed, key):
    """Independent generator for (global seed, scene key)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(str(key).encode())])


def generate_world(seed, count):
    """``count`` scenes, each drawn from its own (seed, index) stream."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    scenes = []
    for i in range(count):
        rng = scene_rng(seed, f"scene-{i}")
        present = bool(rng.random() < 0.5)
        organ = ORGANS[rng.integers(len(ORGANS))]
        texture = TEXTURES[rng.integers(len(TEXTURES))]
        thickness = int(rng.integers(THICKNESS_RANGE[0], THICKNESS_RANGE[1] + 1))
        secondary = bool(rng.random() < 0.5)
        quadrant = QUADRANTS[rng.integers(len(QUADRANTS))] if present else None
        size = int(rng.integers(SIZE_RANGE[0], SIZE_RANGE[1] + 1)) if present else None
        scenes.append(
            Scene(
                id=f"{i:05d}",
                organ=organ,
                nodule_present=present,
                quadrant=quadrant,
                size_units=size,
                echo_texture=texture,
                thickness_units=thickness,
                secondary_abnormal=secondary,
            )
        )
    return scenes


def quadrant_center(quadrant, size=IMAGE_SIZE):
    """(row, col) pixel centre; upper = top rows, outer = left columns."""
    half = size // 2
    row = half // 2 if quadrant.startswith("upper") else half + half // 2
    col = half // 2 if quadrant.endswith("outer") else half + half // 2
    return row, col


def nodule_radii(size_units):
    return 0.75 * size_units, 0.65 * size_units


def _anatomy(scene, size=IMAGE_SIZE):
    """Noise-free, quadrant-symmetric background for a scene."""
    img = np.full((size, size), BACKGROUND, dtype=np.float64)
    mid = size // 2
    img[mid - scene.thickness_units: mid + scene.thickness_units, :] += BAND_GAIN
    if scene.organ == "thyroid":
        img[:, mid - 2: mid + 2] -= TRACHEA_DROP
    if scene.echo_texture == "coarse":
        yy, xx = np.mgrid[0:size, 0:size]
        img += TEXTURE_AMPLITUDE * np.where(((yy // 2) + (xx // 2)) % 2 == 0, 1.0, -1.0)
    if scene.secondary_abnormal:
        for r in (6, 7):
            img[r, :] -= LINE_DROP
            img[size - 1 - r, :] -= LINE_DROP
    return img


def render_images(scene, seed, size=IMAGE_SIZE):
    """Two views (2, size, size) float32: shared anatomy, own noise and nodule jitter."""
    rng = scene_rng(seed, f"render-{scene.id}")
    base = _anatomy(scene, size)
    yy, xx = np.mgrid[0:size, 0:size]
    views = []
    for _ in range(2):
        img = base.copy()
        if scene.nodule_present:
            r0, c0 = quadrant_center(scene.quadrant, size)
            r0 += int(rng.integers(-JITTER, JITTER + 1))
            c0 += int(rng.integers(-JITTER, JITTER + 1))
            rx, ry = nodule_radii(scene.size_units)
            inside = ((xx - c0) / rx) ** 2 + ((yy - r0) / ry) ** 2 <= 1.0
            img[inside] = NODULE_LEVEL
        img += rng.normal(0.0, NOISE_STD, size=img.shape)
        views.append(img)
    return np.stack(views).astype(np.float32)


def quadrant_means(image):
    """Mean intensity per quadrant, keyed by quadrant name."""
    size = image.shape[0]
    out = {}
    for q in QUADRANTS:
        r, c = quadrant_center(q, size)
        half = size // 2
        r0 = 0 if r < half else half
        c0 = 0 if c < half else half
        out[q] = float(image[r0:r0 + half, c0:c0 + half].mean())
    return out
