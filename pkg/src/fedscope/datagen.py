"""Procedural scenes for the three data regimes: real, synthetic and unseen.

Five glyph classes stand in for the assembly parts (button, resistor, LED,
Arduino board, buzzer). Domains differ in background family, lighting, noise,
blur and colour fidelity; the unseen domain adds clutter, motion blur and a
perforated-grid distractor that looks like rows of buttons.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from ._errors import FedscopeError
from .boxes import BoundingBox, format_boxes, from_yolo_line, to_yolo_line

IMAGE_SIZE = 64
N_CLASSES = 5
CELL = 8

# base colours (RGB) per class
CLASS_COLORS = (
    (0.18, 0.18, 0.20),  # button body
    (0.82, 0.68, 0.45),  # resistor body
    (0.90, 0.15, 0.10),  # LED
    (0.05, 0.45, 0.58),  # Arduino board
    (0.10, 0.10, 0.10),  # buzzer
)

# simplified CAD materials used by the synthetic renderer
CAD_COLORS = (
    (0.40, 0.40, 0.45),
    (0.92, 0.86, 0.70),
    (1.00, 0.35, 0.30),
    (0.10, 0.60, 0.45),
    (0.25, 0.25, 0.28),
)

# (min, max) width/height in pixels before orientation
CLASS_SIZES = (
    ((6, 9), (6, 9)),
    ((11, 16), (3, 5)),
    ((8, 11), (3, 5)),
    ((16, 24), (12, 18)),
    ((9, 13), (9, 13)),
)

REAL_TEXTURES = ("breadboard", "desk_speckle")
SYNTHETIC_TEXTURES = ("flat", "flat_two_tone", "soft_gradient")
UNSEEN_TEXTURES = ("wood", "checker_cloth", "dark_mat", "perforated_plate")


@dataclass(frozen=True)
class DomainSpec:
    """Rendering knobs for one data regime. Ranges are ``(low, high)``."""

    name: str
    tag: str
    textures: tuple = REAL_TEXTURES
    brightness: tuple = (-0.08, 0.08)
    contrast: tuple = (0.9, 1.1)
    color_cast: float = 0.03
    noise_sigma: float = 0.03
    blur_sigma: tuple = (0.0, 0.6)
    motion_blur: tuple = (0, 0)
    shading: float = 0.25
    color_jitter: float = 0.08
    clutter: tuple = (0, 4)
    distractors: tuple = ()
    distractor_prob: float = 0.0
    objects: tuple = (3, 8)
    size_scale: tuple = (0.9, 1.1)
    class_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    palette: str = "real"
    detailed: bool = True
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        if self.tag not in ("real", "synthetic", "unseen"):
            raise FedscopeError("bad-domain", self.tag)
        if self.image_size % CELL:
            raise FedscopeError("bad-input-shape", f"image size {self.image_size} not a multiple of {CELL}")
        if len(self.class_weights) != N_CLASSES or min(self.class_weights) < 0 or sum(self.class_weights) <= 0:
            raise FedscopeError("bad-class-weights", str(self.class_weights))
        if self.palette not in ("real", "cad"):
            raise FedscopeError("bad-palette", self.palette)
        if not 0 <= self.objects[0] <= self.objects[1]:
            raise FedscopeError("bad-object-range", str(self.objects))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DomainSpec":
        raw = json.loads(text)
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})

    def with_objects(self, lo: int, hi: int) -> "DomainSpec":
        return DomainSpec(**{**asdict(self), "objects": (lo, hi)})


REAL = DomainSpec(
    name="real",
    tag="real",
    class_weights=(1.0, 1.0, 0.45, 0.45, 1.0),
)

SYNTHETIC = DomainSpec(
    name="synthetic",
    tag="synthetic",
    textures=SYNTHETIC_TEXTURES,
    brightness=(-0.1, 0.1),
    contrast=(0.85, 1.1),
    color_cast=0.0,
    noise_sigma=0.0,
    blur_sigma=(0.0, 0.0),
    shading=0.0,
    color_jitter=0.0,
    clutter=(0, 2),
    objects=(2, 10),
    size_scale=(0.75, 1.25),
    palette="cad",
    detailed=False,
)

UNSEEN = DomainSpec(
    name="unseen",
    tag="unseen",
    textures=UNSEEN_TEXTURES,
    brightness=(-0.12, 0.1),
    contrast=(0.8, 1.05),
    color_cast=0.06,
    noise_sigma=0.035,
    blur_sigma=(0.0, 0.6),
    motion_blur=(0, 2),
    shading=0.3,
    color_jitter=0.1,
    clutter=(2, 8),
    distractors=("perforated_grid",),
    distractor_prob=0.3,
    objects=(8, 14),
    size_scale=(0.8, 1.2),
)

DOMAINS = {"real": REAL, "synthetic": SYNTHETIC, "unseen": UNSEEN}


@dataclass
class SceneSample:
    image: np.ndarray
    annotations: list
    domain: str
    background_only: bool
    texture: str = ""
    distractors: tuple = ()
    seed: int = 0
    object_mask: Optional[np.ndarray] = field(default=None, repr=False, compare=False)  # drawn object pixels

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.image, dtype="<f8").tobytes())
        h.update(format_boxes(self.annotations).encode())
        h.update(f"{self.domain}|{self.background_only}".encode())
        return h.hexdigest()


# -- drawing primitives --------------------------------------------------------


def _grid(size: int):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c)  # xx, yy


def _background(rng, texture: str, size: int) -> np.ndarray:
    xx, yy = _grid(size)
    img = np.empty((size, size, 3))
    if texture == "breadboard":
        base = np.array([0.86, 0.85, 0.80]) + rng.uniform(-0.04, 0.04, 3)
        img[:] = base
        off = rng.integers(0, 4, size=2)
        holes = ((xx.astype(int) - off[0]) % 4 == 0) & ((yy.astype(int) - off[1]) % 4 == 0)
        img[holes] = base * 0.55
        img[(yy.astype(int) % 32) < 2] = base * np.array([0.9, 0.9, 1.05])  # rail stripe
    elif texture == "desk_speckle":
        base = np.array([0.62, 0.56, 0.48]) + rng.uniform(-0.05, 0.05, 3)
        img[:] = base
        img += rng.normal(0.0, 0.05, (size, size, 1))
    elif texture == "flat":
        img[:] = rng.uniform(0.05, 0.95, 3)
    elif texture == "flat_two_tone":
        a, b = rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 3)
        split = rng.integers(size // 4, 3 * size // 4)
        img[:] = a
        img[(xx if rng.random() < 0.5 else yy) > split] = b
    elif texture == "soft_gradient":
        a, b = rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 3)
        t = (xx / size)[..., None]
        img[:] = a * (1 - t) + b * t
    elif texture == "wood":
        base = np.array([0.55, 0.38, 0.22]) + rng.uniform(-0.05, 0.05, 3)
        freq, phase = rng.uniform(0.25, 0.6), rng.uniform(0, 2 * np.pi)
        wobble = 2.0 * np.sin(xx / rng.uniform(5, 12))
        grain = 0.5 + 0.5 * np.sin(freq * (yy + wobble) + phase)
        img[:] = base * (0.75 + 0.35 * grain[..., None])
    elif texture == "checker_cloth":
        a, b = rng.uniform(0.2, 0.8, 3), rng.uniform(0.2, 0.8, 3)
        period = int(rng.integers(3, 7))
        chk = ((xx.astype(int) // period + yy.astype(int) // period) % 2).astype(bool)
        img[:] = a
        img[chk] = b
    elif texture == "dark_mat":
        img[:] = np.array([0.16, 0.17, 0.19]) + rng.uniform(-0.04, 0.06, 3)
        img += rng.normal(0.0, 0.03, (size, size, 1))
    elif texture == "perforated_plate":
        img[:] = np.array([0.66, 0.67, 0.70]) + rng.uniform(-0.05, 0.05, 3)
        _perforated_grid(rng, img, xx, yy, 0, 0, size, size)
    else:
        raise FedscopeError("bad-texture", texture)
    return img


def _perforated_grid(rng, img, xx, yy, x0, y0, x1, y1):
    """Lattice of small dark holes; the false-positive bait."""
    pitch = rng.uniform(6.0, 9.0)
    radius = rng.uniform(1.8, 3.2)
    ox, oy = rng.uniform(0, pitch, 2)
    gx = np.round((xx - ox) / pitch) * pitch + ox
    gy = np.round((yy - oy) / pitch) * pitch + oy
    inside = (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
    mask = inside & ((xx - gx) ** 2 + (yy - gy) ** 2 <= radius**2)
    img[mask] = rng.uniform(0.05, 0.2)
    rim = inside & ~mask & ((xx - gx) ** 2 + (yy - gy) ** 2 <= (radius + 1.0) ** 2)
    img[rim] = img[rim] * 0.8


def _clutter(rng, img, xx, yy, count: int):
    size = img.shape[0]
    for _ in range(count):
        color = rng.uniform(0.0, 1.0, 3)
        kind = rng.integers(0, 3)
        cx, cy = rng.uniform(0, size, 2)
        if kind == 0:  # thin line (wire)
            ang = rng.uniform(0, np.pi)
            length = rng.uniform(8, 30)
            d = np.abs((xx - cx) * np.sin(ang) - (yy - cy) * np.cos(ang))
            along = np.abs((xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang))
            mask = (d <= 0.7) & (along <= length / 2)
        elif kind == 1:  # triangle
            r = rng.uniform(3, 7)
            mask = (yy - cy <= r) & (np.abs(xx - cx) <= (yy - cy + r) * 0.6) & (yy - cy >= -r)
        else:  # square outline
            r = rng.uniform(3, 6)
            box = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
            mask = box & ~((np.abs(xx - cx) <= r - 1.2) & (np.abs(yy - cy) <= r - 1.2))
        img[mask] = color


def _glyph(
    rng, cls: int, w: int, h: int, color: np.ndarray, shading: float, bg_patch: np.ndarray, detailed: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """RGB patch and drawn-pixel mask for one object of class ``cls``."""
    xx, yy = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    cx, cy = w / 2, h / 2
    patch = bg_patch.copy()
    mask = np.zeros((h, w), dtype=bool)
    if cls == 0:  # button: dark disc with a lighter cap
        r = min(w, h) / 2
        body = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        cap = (xx - cx) ** 2 + (yy - cy) ** 2 <= (0.45 * r) ** 2
        patch[body] = color
        if detailed:
            patch[cap] = np.clip(color + 0.35, 0, 1)
        mask = body
    elif cls == 1:  # resistor: bar with colour bands
        horizontal = w >= h
        patch[:] = color
        mask[:] = True
        length = w if horizontal else h
        for k, band in enumerate((0.3, 0.5, 0.7) if detailed else ()):
            pos = int(band * length)
            band_color = ((0.5, 0.1, 0.1), (0.1, 0.1, 0.1), (0.9, 0.6, 0.1))[k]
            if horizontal:
                patch[:, pos] = band_color
            else:
                patch[pos, :] = band_color
    elif cls == 2:  # LED: two small discs
        horizontal = w >= h
        r = min(w, h) / 2
        if horizontal:
            c1, c2 = (r, cy), (w - r, cy)
        else:
            c1, c2 = (cx, r), (cx, h - r)
        for px, py in (c1, c2):
            m = (xx - px) ** 2 + (yy - py) ** 2 <= r * r
            mask |= m
        patch[mask] = color
    elif cls == 3:  # board: rectangle with a dark chip
        patch[:] = color
        mask[:] = True
        chip = (np.abs(xx - cx) <= w * 0.18) & (np.abs(yy - cy) <= h * 0.22)
        patch[chip] = (0.08, 0.08, 0.08)
        if detailed:
            header = yy < 2.0
            patch[header] = np.clip(color * 0.5, 0, 1)
    elif cls == 4:  # buzzer: ring
        r_out = min(w, h) / 2
        r_in = r_out - rng.uniform(2.0, 3.0)
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        mask = (d2 <= r_out**2) & (d2 >= r_in**2)
        patch[mask] = color
    if shading > 0:
        ang = rng.uniform(0, 2 * np.pi)
        grad = ((xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)) / max(w, h)
        factor = 1.0 - shading * (grad + 0.5)
        patch[mask] = np.clip(patch[mask] * factor[mask][:, None], 0, 1)
    return patch, mask


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0.05:
        return img
    radius = max(1, int(np.ceil(2.5 * sigma)))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    k /= k.sum()
    return _separable(img, k, k)


def _motion_blur(img: np.ndarray, length: int, horizontal: bool) -> np.ndarray:
    if length <= 0:
        return img
    k = np.ones(2 * length + 1) / (2 * length + 1)
    ident = np.array([1.0])
    return _separable(img, k if horizontal else ident, ident if horizontal else k)


def _separable(img: np.ndarray, kx: np.ndarray, ky: np.ndarray) -> np.ndarray:
    rx, ry = len(kx) // 2, len(ky) // 2
    padded = np.pad(img, ((ry, ry), (rx, rx), (0, 0)), mode="edge")
    h, w = img.shape[:2]
    tmp = sum(kx[i] * padded[:, i : i + w] for i in range(len(kx)))
    return sum(ky[j] * tmp[j : j + h] for j in range(len(ky)))


def _place(rng, occupied: np.ndarray, cells: set, w: int, h: int, size: int, tries: int = 200):
    """Integer top-left corner for a ``w x h`` box that overlaps nothing (1 px gap)
    and whose center falls in a free grid cell; ``None`` if no spot is found."""
    for _ in range(tries):
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - h + 1))
        cell = (int((y0 + h / 2) // CELL), int((x0 + w / 2) // CELL))
        if cell in cells:
            continue
        if occupied[max(0, y0 - 1) : y0 + h + 1, max(0, x0 - 1) : x0 + w + 1].any():
            continue
        return x0, y0, cell
    return None


def _object_size(rng, cls: int, scale: float) -> tuple[int, int]:
    (wl, wh), (hl, hh) = CLASS_SIZES[cls]
    w = max(2, int(round(rng.integers(wl, wh + 1) * scale)))
    h = max(2, int(round(rng.integers(hl, hh + 1) * scale)))
    if cls in (0, 4):
        h = w
    if cls in (1, 2) and rng.random() < 0.5:
        w, h = h, w
    return w, h


def _sample_classes(rng, spec: DomainSpec, count: int) -> list[int]:
    weights = np.asarray(spec.class_weights, dtype=float)
    return [int(c) for c in rng.choice(N_CLASSES, size=count, p=weights / weights.sum())]


def render_scene(
    spec: DomainSpec,
    seed: int,
    classes: Optional[Sequence[int]] = None,
    distractor: Optional[bool] = None,
) -> SceneSample:
    """Render one scene with exact ground-truth boxes.

    ``classes`` fixes the object classes (otherwise drawn from the domain spec);
    ``distractor`` forces the perforated-grid patch on or off.
    """
    rng = np.random.default_rng(seed)
    size = spec.image_size
    xx, yy = _grid(size)
    texture = spec.textures[int(rng.integers(len(spec.textures)))]
    img = _background(rng, texture, size)
    _clutter(rng, img, xx, yy, int(rng.integers(spec.clutter[0], spec.clutter[1] + 1)))

    placed_distractors = ()
    use_distractor = (
        distractor if distractor is not None else bool(spec.distractors) and rng.random() < spec.distractor_prob
    )
    if use_distractor:
        pw, ph = rng.integers(size // 3, size // 2 + 1, 2)
        px, py = rng.integers(0, size - pw + 1), rng.integers(0, size - ph + 1)
        img[py : py + ph, px : px + pw] = np.array([0.66, 0.67, 0.70]) + rng.uniform(-0.05, 0.05, 3)
        _perforated_grid(rng, img, xx, yy, px, py, px + pw, py + ph)
        placed_distractors = ("perforated_grid",)

    if classes is None:
        classes = _sample_classes(rng, spec, int(rng.integers(spec.objects[0], spec.objects[1] + 1)))
    occupied = np.zeros((size, size), dtype=bool)
    drawn = np.zeros((size, size), dtype=bool)
    cells: set = set()
    boxes = []
    for cls in classes:
        scale = rng.uniform(*spec.size_scale)
        for attempt in range(4):
            w, h = _object_size(rng, cls, scale * (1.0 - 0.15 * attempt))
            spot = _place(rng, occupied, cells, w, h, size)
            if spot is not None:
                break
        if spot is None:
            continue
        x0, y0, cell = spot
        palette = CAD_COLORS if spec.palette == "cad" else CLASS_COLORS
        color = np.clip(np.asarray(palette[cls]) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 1)
        patch, mask = _glyph(rng, cls, w, h, color, spec.shading, img[y0 : y0 + h, x0 : x0 + w], spec.detailed)
        img[y0 : y0 + h, x0 : x0 + w] = patch
        occupied[y0 : y0 + h, x0 : x0 + w] = True
        drawn[y0 : y0 + h, x0 : x0 + w] |= mask
        cells.add(cell)
        boxes.append(BoundingBox(int(cls), float(x0), float(y0), float(x0 + w), float(y0 + h)))

    # photometric pipeline
    img = img * rng.uniform(*spec.contrast) + rng.uniform(*spec.brightness)
    if spec.color_cast:
        img = img + rng.uniform(-spec.color_cast, spec.color_cast, 3)
    img = _gaussian_blur(img, rng.uniform(*spec.blur_sigma))
    if spec.motion_blur[1] > 0:
        img = _motion_blur(img, int(rng.integers(spec.motion_blur[0], spec.motion_blur[1] + 1)), rng.random() < 0.5)
    if spec.noise_sigma:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return SceneSample(img, boxes, spec.tag, not boxes, texture, placed_distractors, int(seed), drawn)


def _sample_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_dataset(spec: DomainSpec, n_images: int, class_balance: bool = False, seed: int = 0) -> list[SceneSample]:
    """``n_images`` scenes; with ``class_balance`` every object slot goes to the
    class with the fewest instances so far (ties broken at random)."""
    if n_images < 1:
        raise FedscopeError("bad-dataset-size", str(n_images))
    plan_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    counts = np.zeros(N_CLASSES, dtype=np.int64)
    plans = []
    for _ in range(n_images):
        k = int(plan_rng.integers(spec.objects[0], spec.objects[1] + 1))
        if class_balance:
            chosen = []
            for _ in range(k):
                low = np.flatnonzero(counts == counts.min())
                c = int(plan_rng.choice(low))
                counts[c] += 1
                chosen.append(c)
        else:
            chosen = _sample_classes(plan_rng, spec, k)
        plans.append(chosen)
    return [render_scene(spec, s, classes=plan) for s, plan in zip(_sample_seeds(seed, n_images), plans)]


def make_unseen_testset(
    seed: int = 0,
    n_annotated: int = 100,
    n_background: int = 16,
    n_grid_backgrounds: int = 8,
    spec: DomainSpec = UNSEEN,
) -> list[SceneSample]:
    """Unseen-environment test set: annotated scenes plus background-only probes.

    The first ``n_grid_backgrounds`` probes carry the perforated-grid distractor.
    """
    annotated = generate_dataset(spec, n_annotated, class_balance=True, seed=seed)
    empty = spec.with_objects(0, 0)
    seeds = _sample_seeds(seed + 7919, n_background)
    probes = [render_scene(empty, s, distractor=i < n_grid_backgrounds) for i, s in enumerate(seeds)]
    return annotated + probes


def manifest_digest(samples: Sequence[SceneSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.digest().encode())
    return h.hexdigest()


# -- on-disk layout --------------------------------------------------------------
# <dir>/images/000000.png, <dir>/labels/000000.txt (YOLO "class cx cy w h"),
# <dir>/manifest.json


def save_dataset(samples: Sequence[SceneSample], directory, spec: Optional[DomainSpec] = None) -> Path:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        name = f"{i:06d}"
        pixels = np.round(s.image * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(root / "images" / f"{name}.png")
        h, w = s.image.shape[:2]
        (root / "labels" / f"{name}.txt").write_text("".join(to_yolo_line(b, w, h) + "\n" for b in s.annotations))
        entries.append(
            {
                "name": name,
                "sha256": s.digest(),
                "domain": s.domain,
                "background_only": s.background_only,
                "texture": s.texture,
                "distractors": list(s.distractors),
                "seed": s.seed,
            }
        )
    manifest = {
        "n_samples": len(entries),
        "dataset_sha256": manifest_digest(samples),
        "domain_spec": json.loads(spec.to_json()) if spec else None,
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load_dataset(directory) -> list[SceneSample]:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    samples = []
    for entry in manifest["samples"]:
        pixels = np.asarray(Image.open(root / "images" / f"{entry['name']}.png").convert("RGB"))
        img = pixels.astype(float) / 255.0
        h, w = img.shape[:2]
        text = (root / "labels" / f"{entry['name']}.txt").read_text()
        boxes = [from_yolo_line(line, w, h) for line in text.splitlines() if line.strip()]
        samples.append(
            SceneSample(
                img,
                boxes,
                entry["domain"],
                entry["background_only"],
                entry.get("texture", ""),
                tuple(entry.get("distractors", ())),
                entry.get("seed", 0),
            )
        )
    return samples
