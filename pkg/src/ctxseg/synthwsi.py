"""Synthetic slides with planted structures, Otsu foreground, tiling, and dataset IO.

Three structure kinds are planted as dark disks on a near-white background:

* class 1 (``E``): plain disk,
* class 2 (``PET``): disk with a dot texture,
* class 3 (``SEL``): the same dotted disk plus one pale blob (the GC marker)
  confined to the disk's centre tile.

Away from the marker tile, ``PET`` and ``SEL`` pixels are drawn from the same
distribution, so only context from the marker tile can tell them apart.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .numerics import ParameterDomainError, ShapeError

CLASS_NAMES = ("BG", "E", "PET", "SEL")
BACKGROUND, E_CLASS, PET_CLASS, SEL_CLASS = range(4)

# full-scale reference constants, recorded but not exercised at desk scale
FULL_SCALE_PATCH_SIDE = 224
FULL_SCALE_MICRONS_PER_PIXEL = 1.0
FULL_SCALE_FEATURE_DIM = 1024

_BG_RGB = np.array([236.0, 226.0, 238.0])
_DISK_RGB = np.array([96.0, 66.0, 132.0])
_DOT_RGB = np.array([40.0, 24.0, 78.0])
_GC_RGB = np.array([240.0, 206.0, 150.0])


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorParams:
    grid: int = 16
    patch: int = 32
    structures: tuple[int, int] = (2, 6)
    radius: tuple[int, int] = (1, 3)
    gc_prob: float = 0.25
    noise: float = 8.0
    dot_density: float = 6.0  # dots per fully covered tile
    dot_radius: float = 2.5
    gc_radius: float = 9.0

    def validate(self) -> None:
        lo, hi = self.structures
        if lo < 0 or hi < lo:
            raise ParameterDomainError(f"bad structure count range {self.structures}")
        rlo, rhi = self.radius
        if rlo < 1 or rhi < rlo:
            raise ParameterDomainError(f"bad radius range {self.radius}")
        if hi > 0 and 2 * rhi + 1 > self.grid:
            raise ParameterDomainError(f"radius {rhi} does not fit a {self.grid}-tile grid")
        if not 0.0 <= self.gc_prob <= 1.0:
            raise ParameterDomainError(f"gc_prob must lie in [0, 1], got {self.gc_prob}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["structures"] = list(self.structures)
        d["radius"] = list(self.radius)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorParams:
        d = dict(d)
        d["structures"] = tuple(d["structures"])
        d["radius"] = tuple(d["radius"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Structure:
    cls: int
    center: tuple[int, int]  # tile coordinate (row, col)
    radius: int  # in tiles; the disk spans (radius + 0.5) tiles of pixels
    gc_tile: tuple[int, int] | None = None


@dataclass
class SyntheticSlide:
    image: np.ndarray  # (H, W, 3) uint8
    labels: np.ndarray  # (H, W) uint8
    seed: int
    params: GeneratorParams
    structures: list[Structure] = field(default_factory=list)


@dataclass
class TileGrid:
    """Non-overlapping P x P tiles over a slide raster.

    Node order everywhere downstream is the row-major order of foreground
    tiles, as returned by :attr:`coords`.
    """

    rows: int
    cols: int
    patch: int
    tiles: np.ndarray  # (rows, cols, P, P, 3) uint8
    labels: np.ndarray  # (rows, cols, P, P) uint8
    foreground: np.ndarray  # (rows, cols) bool
    slide_id: str = ""
    threshold: int | None = None

    @property
    def coords(self) -> list[tuple[int, int]]:
        return [tuple(rc) for rc in np.argwhere(self.foreground).tolist()]

    @property
    def n_foreground(self) -> int:
        return int(self.foreground.sum())

    def foreground_tiles(self) -> np.ndarray:
        return self.tiles[self.foreground]

    def foreground_labels(self) -> np.ndarray:
        return self.labels[self.foreground]


@dataclass
class DatasetManifest:
    slide_ids: list[str]
    splits: dict[str, list[str]]
    class_names: list[str]
    params_digest: str
    params: dict
    seed: int
    format_version: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    manifest: DatasetManifest
    slides: dict[str, SyntheticSlide]

    def split(self, name: str) -> list[str]:
        return list(self.manifest.splits.get(name, []))

    @property
    def params(self) -> GeneratorParams:
        return GeneratorParams.from_dict(self.manifest.params)


# --- Otsu -----------------------------------------------------------------

def otsu_threshold(hist) -> int | None:
    """Smallest t maximising between-class variance of {v <= t} vs {v > t}.

    Comparisons are exact (integer arithmetic), so ties resolve to the lowest
    t deterministically. Returns ``None`` when no split has positive variance.
    """
    counts = [int(c) for c in np.asarray(hist).ravel()]
    if len(counts) != 256:
        raise ParameterDomainError(f"expected a 256-bin histogram, got {len(counts)} bins")
    if any(c < 0 for c in counts):
        raise ParameterDomainError("histogram counts must be nonnegative")
    n = sum(counts)
    if n == 0:
        raise ParameterDomainError("histogram is empty")
    total = sum(v * c for v, c in enumerate(counts))

    # sigma_b^2 * n^2 = (S0*n - S*n0)^2 / (n0*n1); keep it as a fraction
    best_num, best_den, best_t = 0, 1, None
    n0 = s0 = 0
    for t in range(255):
        n0 += counts[t]
        s0 += t * counts[t]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (s0 * n - total * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_num, best_den, best_t = num, den, t
    return best_t


def to_gray(image: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma, rounded to uint8."""
    rgb = image.astype(np.float64)
    gray = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.rint(gray), 0, 255).astype(np.uint8)


# --- generation -------------------------------------------------------------

def _disk_mask(shape: tuple[int, int], cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r


def _paint_disk(canvas: np.ndarray, cy: float, cx: float, r: float, value,
                within: np.ndarray | None = None) -> np.ndarray:
    """Paint pixels of the disk (optionally restricted to ``within``); returns the window mask."""
    H, W = canvas.shape[:2]
    y0, y1 = max(int(math.floor(cy - r)), 0), min(int(math.ceil(cy + r)) + 1, H)
    x0, x1 = max(int(math.floor(cx - r)), 0), min(int(math.ceil(cx + r)) + 1, W)
    if y0 >= y1 or x0 >= x1:
        return np.zeros((0, 0), dtype=bool)
    m = _disk_mask((y1 - y0, x1 - x0), cy - y0, cx - x0, r)
    if within is not None:
        m &= within[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1][m] = value
    return m


def _touched_tiles(center: tuple[int, int], radius: int) -> set[tuple[int, int]]:
    """Tiles sharing any area with the disk."""
    reach = radius + 0.5
    span = int(math.ceil(reach)) + 1
    ci, cj = center
    touched = set()
    for di in range(-span, span + 1):
        for dj in range(-span, span + 1):
            # nearest point of tile (ci+di, cj+dj) to the disk centre, in tile units
            ny = max(abs(di) - 0.5, 0.0)
            nx = max(abs(dj) - 0.5, 0.0)
            if ny * ny + nx * nx < reach * reach:
                touched.add((ci + di, cj + dj))
    return touched


def _grow(tiles: set[tuple[int, int]]) -> set[tuple[int, int]]:
    grown = set(tiles)
    for i, j in tiles:
        grown.update({(i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)})
    return grown


def _plan_layout(params: GeneratorParams, rng: np.random.Generator,
                 layout_attempts: int = 50, place_attempts: int = 100) -> list[Structure]:
    """Non-touching disks: no tile of one disk is 4-adjacent to a tile of another.

    Count and radii are redrawn on each layout attempt.
    """
    lo, hi = params.structures
    last_failure = ""
    for _ in range(layout_attempts):
        count = int(rng.integers(lo, hi + 1))
        radii = rng.integers(params.radius[0], params.radius[1] + 1, size=count)
        blocked: set[tuple[int, int]] = set()
        placed: list[Structure] = []
        for r in radii:
            r = int(r)
            lo_c, hi_c = r, params.grid - 1 - r
            for _ in range(place_attempts):
                c = (int(rng.integers(lo_c, hi_c + 1)), int(rng.integers(lo_c, hi_c + 1)))
                touched = _touched_tiles(c, r)
                if touched.isdisjoint(blocked):
                    blocked |= _grow(touched)
                    u = rng.random()
                    if u < params.gc_prob:
                        cls = SEL_CLASS
                    elif u < params.gc_prob + (1.0 - params.gc_prob) / 2.0:
                        cls = E_CLASS
                    else:
                        cls = PET_CLASS
                    placed.append(Structure(cls, c, r, c if cls == SEL_CLASS else None))
                    break
            else:
                last_failure = (f"could not place structure {len(placed) + 1}/{count} "
                                f"(radius {r}) after {place_attempts} attempts")
                break
        else:
            return placed
    raise GenerationError(f"layout failed after {layout_attempts} attempts on a "
                          f"{params.grid}x{params.grid} grid: {last_failure}")


def generate_slide(params: GeneratorParams, seed: int) -> SyntheticSlide:
    params.validate()
    rng = np.random.default_rng(seed)
    structures = _plan_layout(params, rng)

    P = params.patch
    side = params.grid * P
    canvas = np.broadcast_to(_BG_RGB, (side, side, 3)).copy()
    labels = np.zeros((side, side), dtype=np.uint8)

    for s in structures:
        cy = (s.center[0] + 0.5) * P
        cx = (s.center[1] + 0.5) * P
        R = (s.radius + 0.5) * P
        _paint_disk(canvas, cy, cx, R, _DISK_RGB)
        _paint_disk(labels, cy, cx, R, s.cls)
        # footprints keep same-class disks a tile apart, so this isolates the current disk
        disk = labels == s.cls
        if s.cls in (PET_CLASS, SEL_CLASS):
            n_dots = rng.poisson(params.dot_density * math.pi * (R / P) ** 2)
            for _ in range(n_dots):
                rho = R * math.sqrt(rng.random())
                phi = 2.0 * math.pi * rng.random()
                _paint_disk(canvas, cy + rho * math.sin(phi), cx + rho * math.cos(phi),
                            params.dot_radius, _DOT_RGB, within=disk)
        if s.gc_tile is not None:
            _paint_disk(canvas, (s.gc_tile[0] + 0.5) * P, (s.gc_tile[1] + 0.5) * P,
                        params.gc_radius, _GC_RGB)

    canvas += rng.normal(0.0, params.noise, size=canvas.shape)
    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return SyntheticSlide(image=image, labels=labels, seed=int(seed), params=params,
                          structures=structures)


# --- tiling -----------------------------------------------------------------

def tile_slide(slide: SyntheticSlide | np.ndarray, P: int, tau_fg: float = 0.5,
               labels: np.ndarray | None = None, slide_id: str = "") -> TileGrid:
    """Cut a slide into P x P tiles and flag foreground tiles.

    A pixel is tissue when its gray value is at or below the slide's Otsu
    threshold; a tile is foreground when its tissue fraction is >= ``tau_fg``.
    """
    if isinstance(slide, SyntheticSlide):
        image, labels = slide.image, slide.labels
    else:
        image = slide
        if labels is None:
            labels = np.zeros(image.shape[:2], dtype=np.uint8)
    if not 0.0 < tau_fg <= 1.0:
        raise ParameterDomainError(f"tau_fg must lie in (0, 1], got {tau_fg}")
    H, W = image.shape[:2]
    if P <= 0 or H % P or W % P:
        raise ShapeError(f"raster {H}x{W} is not divisible by patch side {P}")
    rows, cols = H // P, W // P

    gray = to_gray(image)
    t = otsu_threshold(np.bincount(gray.ravel(), minlength=256))
    if t is None:
        foreground = np.zeros((rows, cols), dtype=bool)
    else:
        tissue = (gray <= t).reshape(rows, P, cols, P).mean(axis=(1, 3))
        foreground = tissue >= tau_fg

    tiles = image.reshape(rows, P, cols, P, 3).transpose(0, 2, 1, 3, 4)
    tile_labels = labels.reshape(rows, P, cols, P).transpose(0, 2, 1, 3)
    return TileGrid(rows, cols, P, np.ascontiguousarray(tiles), np.ascontiguousarray(tile_labels),
                    foreground, slide_id, t)


def majority_label(tile_labels: np.ndarray, k: int = len(CLASS_NAMES)) -> int:
    return int(np.bincount(tile_labels.ravel(), minlength=k).argmax())


def coarsen_patches(tiles: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool each tile by ``factor`` and blow it back up (nearest).

    Keeps the P x P shape while discarding detail finer than ``factor`` pixels.
    """
    if factor == 1:
        return tiles
    P = tiles.shape[-3]
    if factor < 1 or P % factor:
        raise ShapeError(f"downsampling factor {factor} does not divide patch side {P}")
    lead = tiles.shape[:-3]
    t = tiles.reshape(*lead, P // factor, factor, P // factor, factor, tiles.shape[-1])
    pooled = t.astype(np.float64).mean(axis=(-4, -2))
    up = np.repeat(np.repeat(pooled, factor, axis=-3), factor, axis=-2)
    return np.clip(np.rint(up), 0, 255).astype(np.uint8)


# --- dataset ---------------------------------------------------------------

def split_counts(n: int) -> tuple[int, int, int]:
    """Train/val/test sizes for a 6:2:2 split; val and test round half up."""
    n_val = int(0.2 * n + 0.5)
    n_test = int(0.2 * n + 0.5)
    return n - n_val - n_test, n_val, n_test


def slide_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def synthesize(n_slides: int, seed: int, params: GeneratorParams | None = None) -> Dataset:
    params = params or GeneratorParams()
    ids = [f"{i:04d}" for i in range(n_slides)]
    slides = {sid: generate_slide(params, slide_seed(seed, i)) for i, sid in enumerate(ids)}
    order = np.random.default_rng(seed).permutation(n_slides)
    n_train, n_val, _ = split_counts(n_slides)
    shuffled = [ids[i] for i in order]
    splits = {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train:n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val:]),
    }
    manifest = DatasetManifest(slide_ids=ids, splits=splits, class_names=list(CLASS_NAMES),
                               params_digest=params.digest(), params=params.to_dict(),
                               seed=int(seed))
    return Dataset(manifest, slides)


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for sid, slide in dataset.slides.items():
        d = root / f"slide_{sid}"
        d.mkdir(exist_ok=True)
        Image.fromarray(slide.image, mode="RGB").save(d / "image.png")
        Image.fromarray(slide.labels, mode="L").save(d / "labels.png")
    m = dataset.manifest.to_dict()
    m["slide_seeds"] = {sid: s.seed for sid, s in dataset.slides.items()}
    (root / "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return root


def _read_png(path: Path, mode: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetFormatError(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise DatasetFormatError(f"{path}: expected PNG mode {mode}, found {im.mode}")
            return np.array(im)
    except DatasetFormatError:
        raise
    except Exception as exc:  # PIL raises a zoo of types on bad input
        raise DatasetFormatError(f"{path}: unreadable PNG ({exc})") from exc


def load_dataset(directory: str | Path) -> Dataset:
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetFormatError(f"missing file: {mpath}")
    try:
        raw = json.loads(mpath.read_text(encoding="utf-8"))
        seeds = raw.pop("slide_seeds", {})
        manifest = DatasetManifest(**raw)
        params = GeneratorParams.from_dict(manifest.params)
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise DatasetFormatError(f"{mpath}: malformed manifest ({exc})") from exc

    slides = {}
    for sid in manifest.slide_ids:
        d = root / f"slide_{sid}"
        image = _read_png(d / "image.png", "RGB")
        labels = _read_png(d / "labels.png", "L")
        if image.shape[:2] != labels.shape:
            raise DatasetFormatError(f"{d}: image {image.shape[:2]} and labels {labels.shape} differ")
        slides[sid] = SyntheticSlide(image, labels, int(seeds.get(sid, 0)), params)
    return Dataset(manifest, slides)
