"""Synthetic shape scenes, videos, and in-context pair sampling.

Every function takes an explicit seed or ``np.random.Generator``; nothing
touches global random state.
"""
from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .formats import quantize_image, read_json, read_mask, read_ppm, write_json, write_mask, write_ppm
from .interaction import InContextExample

CIRCLE, RECTANGLE, TRIANGLE = 1, 2, 3
CATEGORY_NAMES = {CIRCLE: "circle", RECTANGLE: "rectangle", TRIANGLE: "triangle"}
_HUES = {CIRCLE: 0.0, RECTANGLE: 1.0 / 3.0, TRIANGLE: 2.0 / 3.0}
MAX_ATTEMPTS = 20
MAX_PAIR_TRIES = 10
VISIBLE_FRACTION = 0.25


class GenerationError(RuntimeError):
    pass


class PairError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    min_shapes: int = 1
    max_shapes: int = 3
    categories: tuple[int, ...] = (CIRCLE, RECTANGLE, TRIANGLE)
    min_extent: int = 12
    max_extent: int = 26
    overlap: str = "occlude"  # or "disjoint"
    min_visible: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.min_shapes < 1 or self.max_shapes < self.min_shapes:
            raise ValueError(f"bad shape-count range [{self.min_shapes}, {self.max_shapes}]")
        if self.min_extent < 2 or self.max_extent > self.size or self.min_extent > self.max_extent:
            raise ValueError(f"shape extent range [{self.min_extent}, {self.max_extent}] does not fit a {self.size} canvas")
        if self.overlap not in ("occlude", "disjoint"):
            raise ValueError(f"unknown overlap policy {self.overlap!r}")
        unknown = set(self.categories) - set(_HUES)
        if unknown or not self.categories:
            raise ValueError(f"unknown categories {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "categories" in d:
            d["categories"] = tuple(d["categories"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["categories"] = list(self.categories)
        return d


@dataclass
class Scene:
    image: np.ndarray  # H×W×3 in [0,1], 8-bit quantised
    masks: list[np.ndarray]
    categories: list[int]
    seed: int | None = None
    dropped: int = 0

    def example(self, keep: list[int] | None = None) -> InContextExample:
        keep = list(range(len(self.masks))) if keep is None else keep
        return InContextExample(self.image, np.stack([self.masks[k] for k in keep]), [self.categories[k] for k in keep])


@dataclass
class Pair:
    """An in-context training pair with target-side annotations."""

    reference: InContextExample
    target_image: np.ndarray
    target_instances: list[tuple[int, np.ndarray]]  # (category id, mask)
    id_targets: list[tuple[bool, np.ndarray | None]]
    regime: str = "same_image"
    ref_source: list[int] = field(default_factory=list)
    scene_indices: tuple[int, int] | None = None


# ---------------------------------------------------------------------------
# rasterisation


def _grid(size: int):
    ys, xs = np.mgrid[0:size, 0:size]
    return ys + 0.5, xs + 0.5


def raster_circle(size: int, cy: float, cx: float, r: float) -> np.ndarray:
    ys, xs = _grid(size)
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r


def raster_rectangle(size: int, y0: float, x0: float, h: float, w: float) -> np.ndarray:
    ys, xs = _grid(size)
    return (ys >= y0) & (ys < y0 + h) & (xs >= x0) & (xs < x0 + w)


def raster_triangle(size: int, pts: np.ndarray) -> np.ndarray:
    ys, xs = _grid(size)
    (ay, ax), (by, bx), (cy, cx) = pts

    def side(py, px, qy, qx):
        return (xs - qx) * (py - qy) - (px - qx) * (ys - qy)

    d1, d2, d3 = side(ay, ax, by, bx), side(by, bx, cy, cx), side(cy, cx, ay, ax)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def _sample_shape(rng: np.random.Generator, cfg: SceneConfig, category: int, size: int | None = None):
    """Returns a (kind, geometry) tuple; geometry is in pixel units."""
    size = cfg.size if size is None else size
    ext = float(rng.uniform(cfg.min_extent, cfg.max_extent))
    cy = float(rng.uniform(ext / 2, size - ext / 2))
    cx = float(rng.uniform(ext / 2, size - ext / 2))
    if category == CIRCLE:
        return category, (cy, cx, ext / 2)
    if category == RECTANGLE:
        aspect = float(rng.uniform(0.6, 1.0))
        h, w_ = (ext, ext * aspect) if rng.random() < 0.5 else (ext * aspect, ext)
        return category, (cy - h / 2, cx - w_ / 2, h, w_)
    apex = float(rng.uniform(-ext / 3, ext / 3))
    pts = np.array([[cy - ext / 2, cx + apex], [cy + ext / 2, cx - ext / 2], [cy + ext / 2, cx + ext / 2]])
    return category, pts


def _render(shape, size: int, offset=(0.0, 0.0)) -> np.ndarray:
    kind, geo = shape
    dy, dx = offset
    if kind == CIRCLE:
        return raster_circle(size, geo[0] + dy, geo[1] + dx, geo[2])
    if kind == RECTANGLE:
        return raster_rectangle(size, geo[0] + dy, geo[1] + dx, geo[2], geo[3])
    return raster_triangle(size, np.asarray(geo) + np.array([dy, dx]))


def _color(category: int, rng: np.random.Generator) -> np.ndarray:
    value = float(rng.uniform(0.55, 1.0))
    sat = float(rng.uniform(0.7, 0.95))
    return np.array(colorsys.hsv_to_rgb(_HUES[category], sat, value))


def _composite(size: int, layers: list[np.ndarray], colors: list[np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
    img = np.zeros((size, size, 3))
    visible = [m.copy() for m in layers]
    for k, m in enumerate(layers):
        img[m] = colors[k]
        for j in range(k):
            visible[j] &= ~m
    return quantize_image(img), visible


def gen_scene(cfg: SceneConfig, seed: int | None = None) -> Scene:
    """Rasterise shapes back to front; later shapes occlude earlier ones."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    count = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    layers: list[np.ndarray] = []
    visible: list[np.ndarray] = []
    cats: list[int] = []
    colors: list[np.ndarray] = []
    dropped = 0
    for _ in range(count):
        cat = int(rng.choice(cfg.categories))
        color = _color(cat, rng)
        for _attempt in range(MAX_ATTEMPTS):
            raster = _render(_sample_shape(rng, cfg, cat), cfg.size)
            if cfg.overlap == "disjoint" and any((raster & m).any() for m in layers):
                continue
            vis = [v & ~raster for v in visible] + [raster]
            if min(int(v.sum()) for v in vis) >= cfg.min_visible:
                visible = vis
                layers.append(raster)
                cats.append(cat)
                colors.append(color)
                break
        else:
            dropped += 1
    if not layers:
        raise GenerationError(f"no shape could be placed for seed {seed} within {MAX_ATTEMPTS} attempts")
    image, visible = _composite(cfg.size, layers, colors)
    return Scene(image, visible, cats, seed, dropped)


def gen_dataset(cfg: SceneConfig, count: int, base_seed: int | None = None) -> list[Scene]:
    base = cfg.seed if base_seed is None else base_seed
    return [gen_scene(cfg, base * 1_000_003 + i) for i in range(count)]


@dataclass
class Video:
    frames: list[np.ndarray]
    masks: list[list[np.ndarray]]  # masks[t][obj]
    categories: list[int]

    def first_frame_example(self) -> InContextExample:
        return InContextExample(self.frames[0], np.stack(self.masks[0]), self.categories)


def gen_video(cfg: SceneConfig, num_frames: int, seed: int, max_speed: float = 1.5, brightness_drift: float = 0.0) -> Video:
    """Shapes drifting with constant velocity; occlusion order fixed over time.

    ``brightness_drift`` > 0 gives every object its own linear brightness ramp
    of up to that much per frame (hue kept), so appearance changes over time.
    """
    rng = np.random.default_rng(seed)
    count = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    shapes, colors, vels = [], [], []
    for _ in range(count):
        cat = int(rng.choice(cfg.categories))
        color = _color(cat, rng)
        for _attempt in range(MAX_ATTEMPTS):
            shape = _sample_shape(rng, cfg, cat)
            raster = _render(shape, cfg.size)
            layers = [_render(s, cfg.size) for s in shapes] + [raster]
            _, vis = _composite(cfg.size, layers, colors + [color])
            if min(int(v.sum()) for v in vis) >= max(cfg.min_visible, 16):
                shapes.append(shape)
                colors.append(color)
                vels.append(rng.uniform(-max_speed, max_speed, size=2))
                break
    ramps = rng.uniform(-brightness_drift, brightness_drift, size=len(shapes)) if brightness_drift > 0 else np.zeros(len(shapes))
    if not shapes:
        raise GenerationError(f"no shape could be placed for video seed {seed}")
    frames, masks = [], []
    for t in range(num_frames):
        layers = [_render(s, cfg.size, tuple(v * t)) for s, v in zip(shapes, vels)]
        tinted = [np.clip(c * (1.0 + r * t), 0.0, 1.0) for c, r in zip(colors, ramps)]
        img, vis = _composite(cfg.size, layers, tinted)
        frames.append(img)
        masks.append(vis)
    return Video(frames, masks, [s[0] for s in shapes])


# ---------------------------------------------------------------------------
# views and pair sampling


@dataclass(frozen=True)
class View:
    """Square crop ``[y0, y0+side) × [x0, x0+side)`` resized back to the canvas."""

    y0: int
    x0: int
    side: int
    flip: bool = False

    @classmethod
    def identity(cls, size: int) -> "View":
        return cls(0, 0, size, False)

    def _index(self, size: int):
        idx = np.floor((np.arange(size) + 0.5) * self.side / size).astype(int)
        rows = self.y0 + idx
        cols = self.x0 + idx
        if self.flip:
            cols = cols[::-1]
        return rows, cols

    def apply(self, arr: np.ndarray) -> np.ndarray:
        rows, cols = self._index(arr.shape[0])
        return arr[rows][:, cols]

    def visible_fraction(self, mask: np.ndarray) -> float:
        total = int(mask.sum())
        if total == 0:
            return 0.0
        inside = int(mask[self.y0 : self.y0 + self.side, self.x0 : self.x0 + self.side].sum())
        return inside / total


def random_view(rng: np.random.Generator, size: int, scale=(0.5, 1.0), flip_prob: float = 0.5) -> View:
    side = int(round(size * rng.uniform(*scale)))
    side = max(1, min(size, side))
    y0 = int(rng.integers(0, size - side + 1))
    x0 = int(rng.integers(0, size - side + 1))
    return View(y0, x0, side, bool(rng.random() < flip_prob))


def _appears(view: View, mask: np.ndarray) -> np.ndarray | None:
    if view.visible_fraction(mask) < VISIBLE_FRACTION:
        return None
    out = view.apply(mask)
    return out if out.any() else None


def pair_same_image(scene: Scene, rng: np.random.Generator, views: tuple[View, View] | None = None, scale=(0.5, 1.0)) -> Pair:
    """Two views of one scene; instances visible in both carry ID targets."""
    if not scene.masks:
        raise PairError("scene has no annotations")
    size = scene.image.shape[0]
    for _ in range(MAX_PAIR_TRIES if views is None else 1):
        v_ref, v_tgt = views if views is not None else (random_view(rng, size, scale), random_view(rng, size, scale))
        ref_idx, ref_masks = [], []
        for k, m in enumerate(scene.masks):
            vm = _appears(v_ref, m)
            if vm is not None:
                ref_idx.append(k)
                ref_masks.append(vm)
        if ref_idx:
            break
    else:
        raise PairError(f"no instance survives in the reference view after {MAX_PAIR_TRIES} tries")
    ref_cats = [scene.categories[k] for k in ref_idx]
    reference = InContextExample(v_ref.apply(scene.image), np.stack(ref_masks), ref_cats)
    target_masks = {k: _appears(v_tgt, m) for k, m in enumerate(scene.masks)}
    ids = [(target_masks[k] is not None, target_masks[k]) for k in ref_idx]
    instances = [(scene.categories[k], m) for k, m in target_masks.items() if m is not None and scene.categories[k] in set(ref_cats)]
    return Pair(reference, v_tgt.apply(scene.image), instances, ids, "same_image", ref_idx)


def category_pairs(dataset: list[Scene]) -> list[tuple[int, int]]:
    cats = [set(s.categories) for s in dataset]
    return [(i, j) for i in range(len(dataset)) for j in range(len(dataset)) if i != j and cats[i] & cats[j]]


def pair_same_category(dataset: list[Scene], rng: np.random.Generator, all_categories: bool = False, feasible: list[tuple[int, int]] | None = None) -> Pair:
    """Reference and target are different scenes sharing a category; no ID matches."""
    feasible = category_pairs(dataset) if feasible is None else feasible
    if not feasible:
        raise SamplingError("no two scenes share a category")
    i, j = feasible[int(rng.integers(len(feasible)))]
    ref, tgt = dataset[i], dataset[j]
    shared = sorted(set(ref.categories) & set(tgt.categories))
    cat = shared[int(rng.integers(len(shared)))]
    keep = list(range(len(ref.masks))) if all_categories else [k for k, c in enumerate(ref.categories) if c == cat]
    reference = ref.example(keep)
    ref_cats = set(reference.categories)
    instances = [(c, m) for c, m in zip(tgt.categories, tgt.masks) if c in ref_cats]
    ids = [(False, None)] * len(keep)
    return Pair(reference, tgt.image, instances, ids, "same_category", keep, (i, j))


# ---------------------------------------------------------------------------
# export / import


def export_scene(scene: Scene, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / "image.ppm", scene.image)
    instances = []
    for k, (m, c) in enumerate(zip(scene.masks, scene.categories)):
        name = f"mask_{k:03d}.pgm"
        write_mask(d / name, m)
        instances.append({"mask_file": name, "category": int(c)})
    write_json(d / "manifest.json", {"image": "image.ppm", "instances": instances, "seed": scene.seed})


def load_scene(directory) -> Scene:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"scene manifest missing: {manifest_path}")
    manifest = read_json(manifest_path)
    image_path = d / manifest.get("image", "image.ppm")
    if not image_path.is_file():
        raise FileNotFoundError(f"scene image missing: {image_path}")
    masks, cats = [], []
    for inst in manifest["instances"]:
        mp = d / inst["mask_file"]
        if not mp.is_file():
            raise FileNotFoundError(f"mask file missing: {mp}")
        masks.append(read_mask(mp))
        cats.append(int(inst["category"]))
    return Scene(read_ppm(image_path), masks, cats, manifest.get("seed"))
