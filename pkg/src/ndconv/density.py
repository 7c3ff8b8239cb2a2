"""Ground-truth density maps, synthetic crowd scenes and dataset files.

Dataset directory layout::

    manifest.json        scene count, generator config, seed
    scene_{k}.img        image tensor (1, 1, h, w), tensor serialization
    scene_{k}.json       {"w": int, "h": int, "points": [[x, y], ...]}
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import AnnotationError, ConfigError, FormatError
from .tensor import load_tensor, save_tensor

DEFAULT_SIGMA = 1.5
KERNEL_SIZE = 7


@dataclass
class SceneAnnotation:
    points: list[tuple[float, float]]
    h: int
    w: int

    def validate(self) -> None:
        for i, (x, y) in enumerate(self.points):
            if not (0 <= x < self.w and 0 <= y < self.h):
                raise AnnotationError(i, (x, y), (self.h, self.w))

    @property
    def count(self) -> int:
        return len(self.points)

    def to_json(self) -> dict:
        return {"w": self.w, "h": self.h, "points": [[float(x), float(y)] for x, y in self.points]}

    @classmethod
    def from_json(cls, obj: dict) -> "SceneAnnotation":
        return cls([(float(x), float(y)) for x, y in obj["points"]], int(obj["h"]), int(obj["w"]))


@dataclass
class Scene:
    image: np.ndarray
    annotation: SceneAnnotation


def gaussian_kernel7(sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    r = np.arange(KERNEL_SIZE, dtype=np.float64) - KERNEL_SIZE // 2
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def render_density(annotation: SceneAnnotation, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Density map of shape ``(h, w)`` whose sum equals the head count.

    Each head drops one 7x7 kernel at its rounded position; the part that
    falls outside the image is cut off and the remainder rescaled to mass 1.
    """
    annotation.validate()
    h, w = annotation.h, annotation.w
    kernel = gaussian_kernel7(sigma)
    half = KERNEL_SIZE // 2
    dmap = np.zeros((h, w), dtype=np.float64)
    for x, y in annotation.points:
        cx = min(int(math.floor(x + 0.5)), w - 1)
        cy = min(int(math.floor(y + 0.5)), h - 1)
        y0, y1 = max(cy - half, 0), min(cy + half + 1, h)
        x0, x1 = max(cx - half, 0), min(cx + half + 1, w)
        patch = kernel[y0 - cy + half : y1 - cy + half, x0 - cx + half : x1 - cx + half]
        dmap[y0:y1, x0:x1] += patch / patch.sum()
    return dmap


@dataclass
class SynthConfig:
    size: tuple[int, int] = (96, 96)
    heads: tuple[int, int] = (5, 20)
    radius: tuple[float, float] = (2.5, 5.0)
    noise: float = 0.05
    seed: int = 0
    sigma: float = DEFAULT_SIGMA

    def validate(self) -> None:
        h, w = self.size
        lo, hi = self.heads
        rlo, rhi = self.radius
        if h < 8 or w < 8:
            raise ConfigError(f"image size must be at least 8x8, got {h}x{w}")
        if lo < 0 or hi < lo:
            raise ConfigError(f"head-count range [{lo}, {hi}] is empty or negative")
        if not 0 < rlo <= rhi:
            raise ConfigError(f"head radius range [{rlo}, {rhi}] is empty or nonpositive")
        if 2 * rhi >= min(h, w):
            raise ConfigError(f"head radius {rhi} does not fit an image of {h}x{w}")
        if hi > (h * w) // 16:
            raise ConfigError(f"{hi} heads do not fit an image of {h}x{w} (at most {(h * w) // 16})")
        if self.noise < 0:
            raise ConfigError(f"noise level must be nonnegative, got {self.noise}")

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        return cls(tuple(obj["size"]), tuple(obj["heads"]), tuple(obj["radius"]),
                   obj["noise"], obj["seed"], obj.get("sigma", DEFAULT_SIGMA))


def synth_scene(config: SynthConfig, rng: np.random.Generator | None = None):
    """One noisy image with a bright ellipse per head, plus its annotation."""
    config.validate()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    h, w = config.size
    count = int(rng.integers(config.heads[0], config.heads[1] + 1))
    image = np.zeros((h, w), dtype=np.float64)
    if config.noise > 0:
        image += config.noise * rng.standard_normal((h, w))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    points = []
    for _ in range(count):
        x = float(rng.uniform(0, w))
        y = float(rng.uniform(0, h))
        rx = float(rng.uniform(*config.radius))
        ry = rx * float(rng.uniform(1.0, 1.4))
        theta = float(rng.uniform(-0.4, 0.4))
        brightness = float(rng.uniform(0.6, 1.0))
        c, s = math.cos(theta), math.sin(theta)
        u = ((xx - x) * c + (yy - y) * s) / rx
        v = (-(xx - x) * s + (yy - y) * c) / ry
        image += brightness * np.exp(-((u * u + v * v) ** 2))
        points.append((x, y))
    ann = SceneAnnotation(points, h, w)
    return image.astype(np.float32).reshape(1, 1, h, w), ann


def generate_dataset(config: SynthConfig, n_scenes: int) -> list[Scene]:
    """Scene ``k`` is drawn from its own stream seeded by ``(seed, k)``."""
    return [Scene(*synth_scene(config, np.random.default_rng([config.seed, k]))) for k in range(n_scenes)]


def save_scene(directory, k: int, scene: Scene) -> None:
    directory = Path(directory)
    save_tensor(directory / f"scene_{k}.img", scene.image)
    with open(directory / f"scene_{k}.json", "w") as fh:
        json.dump(scene.annotation.to_json(), fh)


def save_dataset(directory, scenes: list[Scene], manifest: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, scene in enumerate(scenes):
        save_scene(directory, k, scene)
    if manifest is not None:
        with open(directory / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)


def _load_annotation(path: Path) -> SceneAnnotation:
    raw = path.read_bytes()
    try:
        obj = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise FormatError(path, exc.start, "annotation is not UTF-8") from None
    except json.JSONDecodeError as exc:
        raise FormatError(path, len(exc.doc[: exc.pos].encode("utf-8")), exc.msg) from None
    try:
        ann = SceneAnnotation.from_json(obj)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(path, 0, f"bad annotation structure: {exc}") from None
    ann.validate()
    return ann


def load_dataset(directory) -> list[Scene]:
    """Load every ``scene_{k}`` in index order; an empty directory gives ``[]``."""
    directory = Path(directory)
    indices = sorted(int(m.group(1)) for p in directory.iterdir()
                     if (m := re.fullmatch(r"scene_(\d+)\.json", p.name)))
    if indices != list(range(len(indices))):
        raise FormatError(directory, 0, f"scene indices are not contiguous from 0: {indices[:10]}")
    scenes = []
    for k in indices:
        ann = _load_annotation(directory / f"scene_{k}.json")
        img_path = directory / f"scene_{k}.img"
        if not img_path.exists():
            raise FormatError(img_path, 0, "image file missing")
        image = load_tensor(img_path)
        if image.shape != (1, 1, ann.h, ann.w):
            raise FormatError(img_path, 0, f"image shape {image.shape} does not match annotation {ann.h}x{ann.w}")
        scenes.append(Scene(image, ann))
    return scenes


def load_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        return {}
    return json.loads(path.read_text())
