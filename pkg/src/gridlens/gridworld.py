"""Synthetic patch-grid scenes standing in for annotated photographs.

A scene is a G x G grid of cells. Each object is an axis-aligned block of
cells carrying one class; every cell renders to a ``d_vis`` vector equal to
its class signature (or the background vector) plus Gaussian noise. Class
signatures and the background vector are orthonormal, so "does this cell show
class c" has an exact answer.

Noise is drawn per cell from the render seed independently of cell content.
Removing an object from a scene therefore changes exactly that object's cells
when both versions are rendered with the same seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy import ndimage

SCHEMA_VERSION = 1
BACKGROUND = -1

MIN_AREA_FRAC = 0.004
MAX_AREA_FRAC = 0.60
SIGNATURE_SEED = 20240601


class GenerationError(RuntimeError):
    pass


class LookupFailure(KeyError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    class_id: int
    box: tuple[int, int, int, int]  # x_min, y_min, x_max, y_max, inclusive

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if x0 > x1 or y0 > y1:
            raise ValueError(f"degenerate box {self.box}")

    @property
    def width(self) -> int:
        return self.box[2] - self.box[0] + 1

    @property
    def height(self) -> int:
        return self.box[3] - self.box[1] + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def cells(self, grid_size: int) -> list[int]:
        x0, y0, x1, y1 = self.box
        return [y * grid_size + x for y in range(y0, y1 + 1) for x in range(x0, x1 + 1)]


@dataclass(frozen=True)
class Scene:
    grid_size: int
    objects: tuple[ObjectSpec, ...]
    background_seed: int
    noise_scale: float = 0.002

    def find(self, class_id: int) -> ObjectSpec:
        for obj in self.objects:
            if obj.class_id == class_id:
                return obj
        raise LookupFailure(f"class {class_id} not present in scene")

    def label_grid(self) -> np.ndarray:
        """(G, G) array of object indices, BACKGROUND where empty; indexed [y, x]."""
        labels = np.full((self.grid_size, self.grid_size), BACKGROUND, dtype=np.int64)
        for i, obj in enumerate(self.objects):
            x0, y0, x1, y1 = obj.box
            labels[y0:y1 + 1, x0:x1 + 1] = i
        return labels


@dataclass(frozen=True)
class ScenePair:
    """Source has the target object; base is the same scene with it removed."""

    source: Scene
    base: Scene
    target_class: int


@dataclass
class TokenGrid:
    grid_size: int
    embeddings: np.ndarray  # (G*G, d_vis), row-major over cells
    cell_labels: np.ndarray  # (G*G,) object index or BACKGROUND

    def __post_init__(self):
        self.embeddings.flags.writeable = False


@dataclass(frozen=True)
class SceneParams:
    grid_size: int = 8
    n_classes: int = 10
    d_vis: int = 32
    n_objects: tuple[int, int] = (1, 3)
    min_side: int = 1
    max_side: int = 4
    noise_scale: float = 0.002
    classes: tuple[int, ...] | None = None
    sizes: tuple[tuple[int, int], ...] | None = None  # requested (width, height) per object
    max_retries: int = 200

    def area_bounds(self) -> tuple[int, int]:
        cells = self.grid_size ** 2
        return math.ceil(MIN_AREA_FRAC * cells), math.floor(MAX_AREA_FRAC * cells)


# --------------------------------------------------------------------------
# signatures


@lru_cache(maxsize=None)
def _basis(n_classes: int, d_vis: int) -> np.ndarray:
    if d_vis < n_classes + 1:
        raise ValueError(f"d_vis={d_vis} too small for {n_classes} classes plus background")
    rng = np.random.default_rng(SIGNATURE_SEED)
    q, r = np.linalg.qr(rng.normal(size=(d_vis, d_vis)))
    q = q * np.sign(np.diag(r))
    basis = q[:, : n_classes + 1].T.copy()
    basis.flags.writeable = False
    return basis


def class_signatures(n_classes: int = 10, d_vis: int = 32) -> np.ndarray:
    """(n_classes, d_vis) orthonormal rows, fixed for a given shape."""
    return _basis(n_classes, d_vis)[:n_classes]


def background_vector(n_classes: int = 10, d_vis: int = 32) -> np.ndarray:
    return _basis(n_classes, d_vis)[n_classes]


# --------------------------------------------------------------------------
# generation


def passes_filters(scene: Scene) -> bool:
    lo, hi = SceneParams(grid_size=scene.grid_size).area_bounds()
    classes = [o.class_id for o in scene.objects]
    if len(set(classes)) != len(classes):
        return False
    labels = np.zeros((scene.grid_size, scene.grid_size), dtype=np.int64)
    for obj in scene.objects:
        if not lo <= obj.area <= hi or obj.width < 1 or obj.height < 1:
            return False
        x0, y0, x1, y1 = obj.box
        if min(obj.box) < 0 or max(x1, y1) >= scene.grid_size:
            return False
        labels[y0:y1 + 1, x0:x1 + 1] += 1
    return bool(labels.max(initial=0) <= 1)


def generate_scene(rng_seed: int, params: SceneParams = SceneParams()) -> Scene:
    """Sample a scene that passes the size, uniqueness and overlap filters."""
    g = params.grid_size
    if g < 4 or params.n_classes < 2:
        raise GenerationError("need grid_size >= 4 and n_classes >= 2")
    lo, hi = params.area_bounds()
    if lo > hi or params.min_side > params.max_side or params.min_side < 1:
        raise GenerationError(f"infeasible size bounds: area [{lo}, {hi}], side [{params.min_side}, {params.max_side}]")
    if params.classes is not None:
        if len(set(params.classes)) != len(params.classes):
            raise GenerationError(f"duplicate classes requested: {params.classes}")
        if any(not 0 <= c < params.n_classes for c in params.classes):
            raise GenerationError(f"class id out of range: {params.classes}")
    if params.sizes is not None:
        for w, h in params.sizes:
            if not lo <= w * h <= hi or min(w, h) < 1 or max(w, h) > g:
                raise GenerationError(f"requested size {w}x{h} violates the area filter [{lo}, {hi}]")

    rng = np.random.default_rng(rng_seed)
    for _ in range(params.max_retries):
        if params.classes is not None:
            classes = list(params.classes)
        elif params.sizes is not None:
            classes = list(rng.choice(params.n_classes, size=len(params.sizes), replace=False))
        else:
            k = int(rng.integers(params.n_objects[0], params.n_objects[1] + 1))
            classes = list(rng.choice(params.n_classes, size=min(k, params.n_classes), replace=False))
        occupied = np.zeros((g, g), dtype=bool)
        objects = []
        for i, c in enumerate(classes):
            obj = _place(rng, params, occupied, params.sizes[i] if params.sizes is not None else None, lo, hi)
            if obj is None:
                break
            objects.append(ObjectSpec(int(c), obj))
        else:
            seed = int(rng.integers(0, 2**31 - 1))
            scene = Scene(g, tuple(objects), seed, params.noise_scale)
            if passes_filters(scene):
                return scene
    raise GenerationError(f"no valid scene after {params.max_retries} attempts (seed {rng_seed})")


def _place(rng, params: SceneParams, occupied: np.ndarray, size, lo: int, hi: int):
    g = params.grid_size
    for _ in range(50):
        if size is None:
            w = int(rng.integers(params.min_side, min(params.max_side, g) + 1))
            h = int(rng.integers(params.min_side, min(params.max_side, g) + 1))
        else:
            w, h = size
        if not lo <= w * h <= hi:
            continue
        x0 = int(rng.integers(0, g - w + 1))
        y0 = int(rng.integers(0, g - h + 1))
        if occupied[y0:y0 + h, x0:x0 + w].any():
            continue
        occupied[y0:y0 + h, x0:x0 + w] = True
        return (x0, y0, x0 + w - 1, y0 + h - 1)
    return None


def generate_scenes(n: int, seed: int, params: SceneParams = SceneParams()) -> list[Scene]:
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)
    return [generate_scene(int(s), params) for s in seeds]


# --------------------------------------------------------------------------
# rendering


def render_tokens(scene: Scene, rng_seed: int | None = None, *, n_classes: int = 10, d_vis: int = 32) -> TokenGrid:
    """Render cell embeddings; ``rng_seed`` defaults to the scene's background seed."""
    seed = scene.background_seed if rng_seed is None else rng_seed
    g = scene.grid_size
    sigs = class_signatures(n_classes, d_vis)
    labels = scene.label_grid().reshape(-1)
    base = np.tile(background_vector(n_classes, d_vis), (g * g, 1))
    for i, obj in enumerate(scene.objects):
        base[labels == i] = sigs[obj.class_id]
    noise = np.random.default_rng(seed).normal(size=(g * g, d_vis)) * scene.noise_scale
    return TokenGrid(g, base + noise, labels)


def remove_object(scene: Scene, target_class: int) -> Scene:
    obj = scene.find(target_class)
    return replace(scene, objects=tuple(o for o in scene.objects if o is not obj))


def make_control_pair(scene: Scene, target_class: int, rng_seed: int | None = None) -> ScenePair:
    """Object-present / object-removed pair sharing every other cell bit for bit.

    ``rng_seed`` overrides the render seed of both members.
    """
    scene.find(target_class)
    if rng_seed is not None:
        scene = replace(scene, background_seed=rng_seed)
    return ScenePair(scene, remove_object(scene, target_class), target_class)


# --------------------------------------------------------------------------
# masks


_EIGHT = np.ones((3, 3), dtype=bool)


def cells_to_mask(cells: Iterable[int], grid_size: int) -> np.ndarray:
    mask = np.zeros(grid_size * grid_size, dtype=bool)
    mask[list(cells)] = True
    return mask.reshape(grid_size, grid_size)


def mask_to_cells(mask: np.ndarray) -> frozenset[int]:
    return frozenset(int(i) for i in np.flatnonzero(mask.reshape(-1)))


def mask_to_tokens(mask, padding: int, grid_size: int | None = None) -> frozenset[int]:
    """Dilate (padding > 0) or erode (padding < 0) a cell mask with 8-connectivity.

    ``mask`` is a (G, G) boolean array or an iterable of cell indices (then
    ``grid_size`` is required). Dilation is clipped to the grid; cells outside
    the grid count as background for erosion.
    """
    if not -2 <= padding <= 2:
        raise ValueError(f"padding must lie in [-2, 2], got {padding}")
    if not isinstance(mask, np.ndarray):
        if grid_size is None:
            raise ValueError("grid_size needed when passing cell indices")
        mask = cells_to_mask(mask, grid_size)
    mask = np.asarray(mask, dtype=bool)
    if padding > 0:
        if not mask.any():
            raise ValueError("cannot dilate an empty mask")
        mask = ndimage.binary_dilation(mask, structure=_EIGHT, iterations=padding)
    elif padding < 0:
        mask = ndimage.binary_erosion(mask, structure=_EIGHT, iterations=-padding, border_value=0)
    return mask_to_cells(mask)


def box_mask(box: Sequence[int], grid_size: int) -> np.ndarray:
    x0, y0, x1, y1 = box
    mask = np.zeros((grid_size, grid_size), dtype=bool)
    mask[y0:y1 + 1, x0:x1 + 1] = True
    return mask


def cell_xy(cell: int, grid_size: int) -> tuple[int, int]:
    return cell % grid_size, cell // grid_size


# --------------------------------------------------------------------------
# serialization


def scene_record(scene: Scene, **extra) -> dict:
    rec = {
        "schema": SCHEMA_VERSION,
        "kind": "scene",
        "grid_size": scene.grid_size,
        "background_seed": scene.background_seed,
        "noise_scale": scene.noise_scale,
        "objects": [{"class_id": o.class_id, "box": list(o.box)} for o in scene.objects],
    }
    rec.update(extra)
    return rec


def scene_from_record(rec: dict) -> Scene:
    if rec.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported scene schema {rec.get('schema')!r}")
    objects = tuple(ObjectSpec(int(o["class_id"]), tuple(int(v) for v in o["box"])) for o in rec["objects"])
    return Scene(int(rec["grid_size"]), objects, int(rec["background_seed"]), float(rec["noise_scale"]))


def pair_record(pair: ScenePair) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "kind": "pair",
        "target_class": pair.target_class,
        "source": scene_record(pair.source),
        "base": scene_record(pair.base),
    }


def pair_from_record(rec: dict) -> ScenePair:
    if rec.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported pair schema {rec.get('schema')!r}")
    return ScenePair(scene_from_record(rec["source"]), scene_from_record(rec["base"]), int(rec["target_class"]))


def manifest_text(scenes: Sequence[Scene] = (), pairs: Sequence[ScenePair] = ()) -> str:
    """One JSON record per line: scenes first, then control pairs."""
    lines = [json.dumps(scene_record(s), separators=(",", ":")) for s in scenes]
    lines += [json.dumps(pair_record(p), separators=(",", ":")) for p in pairs]
    return "".join(line + "\n" for line in lines)


def write_manifest(path: str | Path, scenes: Sequence[Scene] = (), pairs: Sequence[ScenePair] = ()) -> None:
    Path(path).write_text(manifest_text(scenes, pairs))


def read_manifest(path: str | Path) -> tuple[list[Scene], list[ScenePair]]:
    scenes, pairs = [], []
    for line in _lines(path):
        rec = json.loads(line)
        if rec["kind"] == "scene":
            scenes.append(scene_from_record(rec))
        elif rec["kind"] == "pair":
            pairs.append(pair_from_record(rec))
        else:
            raise ValueError(f"unknown record kind {rec['kind']!r}")
    return scenes, pairs


def _lines(path) -> Iterator[str]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield line
