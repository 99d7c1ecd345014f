"""Procedural stand-ins for tactile-sensor images of the 48 polyp phantoms.

Each phantom is rendered as a height field (the imprint the polyp leaves in a
gel membrane) that is shaded with three coloured lights from different
azimuths, similar to how a retrographic sensor colours surface normals.

Class motifs
------------
T1 / IIa   slightly elevated flat plateau with a granular top
T2 / IIc   raised rim around a central depression
T3 / Ip    single tall pedunculated dome
T4 / LST   laterally spreading field of small nodules

The geometry variant changes scale, placement and nodule count; hardness
scales the imprint depth and contrast (softer material presses deeper).
The only seed-dependent part of an image is the additive noise, so with
``noise_amplitude=0`` every seed renders the same picture.
"""

from __future__ import annotations

import configparser
import enum
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._util import stable_seed

IMAGE_SIZE = 224


class PolypClass(enum.Enum):
    T1 = "IIa"
    T2 = "IIc"
    T3 = "Ip"
    T4 = "LST"

    @property
    def code(self) -> str:
        return self.name

    @property
    def paris_label(self) -> str:
        return self.value

    @property
    def index(self) -> int:
        return int(self.name[1]) - 1

    @classmethod
    def parse(cls, text: str) -> "PolypClass":
        text = str(text).strip()
        for c in cls:
            if text in (c.name, c.value):
                return c
        raise ValueError(f"unknown polyp class {text!r}")


CLASSES = tuple(PolypClass)


class Hardness(enum.Enum):
    H1 = ("Agilus DM400", "Shore A 1-2")
    H2 = ("Agilus DM600", "Shore A 30-40")
    H3 = ("Vero Pure White", "Shore D 83-86")

    @property
    def code(self) -> str:
        return self.name

    @property
    def material_label(self) -> str:
        return self.value[0]

    @property
    def shore_label(self) -> str:
        return self.value[1]

    @classmethod
    def parse(cls, text: str) -> "Hardness":
        return cls[str(text).strip()]


# imprint depth relative to the softest material
_DEPTH = {Hardness.H1: 1.0, Hardness.H2: 0.72, Hardness.H3: 0.48}

N_GEOMETRIES = 4


@dataclass(frozen=True, order=True)
class PhantomSpec:
    polyp_class: PolypClass
    geometry_variant: int
    hardness: Hardness

    def __post_init__(self):
        if not isinstance(self.polyp_class, PolypClass):
            raise ValueError(f"bad polyp class {self.polyp_class!r}")
        if not isinstance(self.hardness, Hardness):
            raise ValueError(f"bad hardness {self.hardness!r}")
        if not (isinstance(self.geometry_variant, int) and 1 <= self.geometry_variant <= N_GEOMETRIES):
            raise ValueError(f"geometry_variant must be in 1..{N_GEOMETRIES}, got {self.geometry_variant!r}")

    @property
    def base_id(self) -> str:
        return f"{self.polyp_class.name}-G{self.geometry_variant}-{self.hardness.name}"

    @classmethod
    def from_base_id(cls, base_id: str) -> "PhantomSpec":
        try:
            t, g, h = base_id.split("-")
            if not g.startswith("G"):
                raise ValueError
            return cls(PolypClass[t], int(g[1:]), Hardness[h])
        except (KeyError, ValueError):
            raise ValueError(f"malformed base_id {base_id!r}") from None


def enumerate_phantom_grid() -> list[PhantomSpec]:
    """All 4 x 4 x 3 phantoms, ordered by class, then geometry, then hardness."""
    return [
        PhantomSpec(c, j, h)
        for c in PolypClass
        for j in range(1, N_GEOMETRIES + 1)
        for h in Hardness
    ]


@dataclass(frozen=True)
class TexturalImage:
    pixels: np.ndarray
    provenance: str = "synthetic"

    def __post_init__(self):
        px = self.pixels
        if not isinstance(px, np.ndarray) or px.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            shape = getattr(px, "shape", None)
            raise ValueError(f"image must be {IMAGE_SIZE}x{IMAGE_SIZE}x3, got {shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"image must be uint8, got {px.dtype}")
        if self.provenance not in ("synthetic", "ingested"):
            raise ValueError(f"bad provenance {self.provenance!r}")


@dataclass(frozen=True)
class GeneratorConfig:
    """Rendering knobs.

    ``noise_amplitude`` and ``motif_contrast`` default to the preset of the
    chosen difficulty when left as ``None``.
    """

    difficulty: str = "easy"
    master_seed: int = 0
    noise_amplitude: float | None = None
    motif_contrast: float | None = None

    def __post_init__(self):
        if self.difficulty not in DIFFICULTY_PRESETS:
            raise ValueError(f"difficulty must be one of {sorted(DIFFICULTY_PRESETS)}")
        for name in ("noise_amplitude", "motif_contrast"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def noise(self) -> float:
        if self.noise_amplitude is None:
            return DIFFICULTY_PRESETS[self.difficulty]["noise_amplitude"]
        return float(self.noise_amplitude)

    @property
    def contrast(self) -> float:
        if self.motif_contrast is None:
            return DIFFICULTY_PRESETS[self.difficulty]["motif_contrast"]
        return float(self.motif_contrast)

    @property
    def spread(self) -> float:
        return DIFFICULTY_PRESETS[self.difficulty]["geometry_spread"]

    @classmethod
    def from_file(cls, path) -> "GeneratorConfig":
        """Read a ``[generator]`` section of ``key = value`` lines."""
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(path)
        section = parser["generator"] if parser.has_section("generator") else parser.defaults()
        return cls.from_mapping(section)

    @classmethod
    def from_mapping(cls, mapping) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ValueError(f"unknown generator keys: {sorted(unknown)}")
        kw = {}
        for key, raw in mapping.items():
            raw = str(raw).strip()
            if key == "difficulty":
                kw[key] = raw
            elif key == "master_seed":
                kw[key] = int(raw)
            else:
                kw[key] = None if raw.lower() in ("", "none", "default") else float(raw)
        return cls(**kw)

    def to_text(self) -> str:
        lines = ["[generator]"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'default' if v is None else v}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, **kw) -> "GeneratorConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


DIFFICULTY_PRESETS = {
    "easy": {"noise_amplitude": 0.25, "motif_contrast": 1.0, "geometry_spread": 0.5},
    "hard": {"noise_amplitude": 0.5, "motif_contrast": 0.6, "geometry_spread": 0.5},
}

# per-variant (scale, dx, dy, nodules); dx, dy are multiplied by the preset spread
_GEOMETRY = {
    1: (1.00, 0.00, 0.00, 6),
    2: (0.80, 0.18, -0.12, 8),
    3: (1.20, -0.15, 0.16, 10),
    4: (0.92, 0.10, 0.22, 13),
}

_LIGHT_AZIMUTHS = np.deg2rad([90.0, 210.0, 330.0])
_LIGHT_ELEVATION = np.deg2rad(40.0)
_GEL_TINT = np.array([112.0, 118.0, 124.0])


def _grid():
    ax = np.linspace(-1.0, 1.0, IMAGE_SIZE)
    return np.meshgrid(ax, ax)  # (x, y), y grows downward in image rows


def _gauss(x, y, cx, cy, sigma):
    return np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * sigma**2))


def _motif_height(spec: PhantomSpec, spread: float) -> np.ndarray:
    """Noise-free height field of the imprint, roughly in [-0.6, 1]."""
    x, y = _grid()
    scale, dx, dy, count = _GEOMETRY[spec.geometry_variant]
    cx, cy = dx * spread, dy * spread
    r = np.hypot(x - cx, y - cy)
    # fixed per-phantom detail (granules, nodule layout); not seed dependent
    rng = np.random.default_rng(stable_seed("motif", spec.base_id))
    c = spec.polyp_class

    if c is PolypClass.T1:
        radius = 0.48 * scale
        h = 0.38 / (1.0 + np.exp((r - radius) / 0.035))
        granules = ndimage.gaussian_filter(rng.standard_normal(r.shape), 2.0)
        granules /= granules.std() + 1e-12
        h = h + 0.05 * granules * (h > 0.1)
    elif c is PolypClass.T2:
        radius = 0.36 * scale
        rim = 0.45 * np.exp(-((r - radius) ** 2) / (2 * (0.075 * scale) ** 2))
        pit = 0.55 * np.exp(-(r**2) / (2 * (0.17 * scale) ** 2))
        h = rim - pit
    elif c is PolypClass.T3:
        sigma = 0.2 * scale
        h = np.exp(-(r**2) / (2 * sigma**2))
        # narrow stalk shadow trailing the head
        h = h + 0.25 * _gauss(x, y, cx + 0.25 * scale, cy + 0.25 * scale, 0.07 * scale)
    else:
        h = 0.12 * np.exp(-(((x - cx) / (0.75 * scale)) ** 2 + ((y - cy) / (0.5 * scale)) ** 2))
        for _ in range(count):
            ang = rng.uniform(0, 2 * np.pi)
            rad = 0.62 * scale * np.sqrt(rng.uniform(0.05, 1.0))
            px, py = cx + rad * np.cos(ang), cy + 0.7 * rad * np.sin(ang)
            h = h + rng.uniform(0.35, 0.55) * _gauss(x, y, px, py, rng.uniform(0.06, 0.1) * scale)
    return h * _DEPTH[spec.hardness]


def _noise_height(rng: np.random.Generator, amplitude: float) -> np.ndarray:
    """Additive seeded height noise: smooth undulation plus stray bumps."""
    x, y = _grid()
    low = ndimage.gaussian_filter(rng.standard_normal(x.shape), 14.0, mode="wrap")
    low /= low.std() + 1e-12
    h = 0.18 * low
    for _ in range(rng.integers(3, 9)):
        bx, by = rng.uniform(-0.9, 0.9, size=2)
        h = h + rng.uniform(-0.35, 0.45) * _gauss(x, y, bx, by, rng.uniform(0.04, 0.16))
    fine = ndimage.gaussian_filter(rng.standard_normal(x.shape), 1.2)
    h = h + 0.04 * fine / (fine.std() + 1e-12)
    return amplitude * h


def _shade(height: np.ndarray, contrast: float) -> np.ndarray:
    gy, gx = np.gradient(height * 28.0)
    norm = np.sqrt(gx**2 + gy**2 + 1.0)
    nx, ny, nz = -gx / norm, -gy / norm, 1.0 / norm
    out = np.empty(height.shape + (3,))
    ce, se = np.cos(_LIGHT_ELEVATION), np.sin(_LIGHT_ELEVATION)
    for ch, az in enumerate(_LIGHT_AZIMUTHS):
        lx, ly = ce * np.cos(az), ce * np.sin(az)
        lambert = nx * lx + ny * ly + nz * se
        out[..., ch] = _GEL_TINT[ch] + contrast * (150.0 * (lambert - se) + 60.0 * height)
    return out


def generate_phantom_image(spec: PhantomSpec, seed: int, config: GeneratorConfig | None = None) -> TexturalImage:
    if not isinstance(spec, PhantomSpec):
        raise ValueError(f"not a PhantomSpec: {spec!r}")
    config = config or GeneratorConfig()
    amp = config.noise
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)

    height = _motif_height(spec, config.spread)
    if amp > 0:
        height = height + _noise_height(rng, amp)
    rgb = _shade(height, config.contrast)
    if amp > 0:
        gain = 1.0 + 0.12 * amp * rng.standard_normal(3)
        offset = 14.0 * amp * rng.standard_normal(3)
        rgb = rgb * gain + offset + 6.0 * amp * rng.standard_normal(rgb.shape)
    pixels = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return TexturalImage(pixels, "synthetic")


def spec_seed(master_seed: int, base_id: str) -> int:
    return stable_seed(master_seed, base_id)


def generate_corpus(grid, master_seed: int = 0, difficulty: str = "easy",
                    config: GeneratorConfig | None = None) -> list[tuple[PhantomSpec, TexturalImage]]:
    """One image per spec; seed per spec is ``stable_seed(master_seed, base_id)``."""
    if config is None:
        config = GeneratorConfig(difficulty=difficulty, master_seed=master_seed)
    grid = list(grid)
    seen = set()
    for spec in grid:
        if spec.base_id in seen:
            raise ValueError(f"duplicate base_id {spec.base_id}")
        seen.add(spec.base_id)
    return [(spec, generate_phantom_image(spec, spec_seed(config.master_seed, spec.base_id), config))
            for spec in grid]


def save_png(image: TexturalImage, path) -> None:
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image.pixels).save(path, format="PNG")


def load_png(path, provenance: str = "synthetic") -> TexturalImage:
    from PIL import Image

    with Image.open(path) as im:
        return TexturalImage(np.asarray(im.convert("RGB")).copy(), provenance)
