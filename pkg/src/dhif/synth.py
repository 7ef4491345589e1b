"""Synthetic infrared-like scenes with small targets and target-like clutter.

A scene is a smooth background (low-frequency cosine gratings plus a blurred
noise floor) overlaid with structural clutter (step edges, corners, bright
disks of radius 3-6 px, broken-cloud patches) and 0-3 small Gaussian
targets.  Ground truth marks the pixels where a target reaches half its
peak.  Values are kept in [0, 1]; the target-free scene is capped at 0.8 so
every mask pixel stays at least 0.15 above it.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import GenerationError
from .storage import load_image, load_mask, save_image, save_mask
from .tensor import SeededRng, derive_seeds

TARGET_FREE_CAP = 0.8
MIN_SEPARATION = 8
BORDER = 4


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    n_low: int = 4
    edges: int = 2
    corners: int = 2
    blobs: int = 3
    clouds: int = 2
    clutter_amplitude: tuple = (0.15, 0.35)
    targets_min: int = 1
    targets_max: int = 3
    sigma_range: tuple = (0.7, 2.0)
    amplitude_range: tuple = (0.3, 0.8)
    noise_density: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.height < 2 * BORDER + 1 or self.width < 2 * BORDER + 1:
            raise ValueError(f"scene {self.height}x{self.width} too small")
        if not 0 <= self.targets_min <= self.targets_max:
            raise ValueError("need 0 <= targets_min <= targets_max")
        if not 0.0 <= self.noise_density <= 1.0:
            raise ValueError("noise_density must lie in [0, 1]")
        for name in ("n_low", "edges", "corners", "blobs", "clouds"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class Scene:
    image: np.ndarray  # 1 x H x W
    mask: np.ndarray  # H x W, uint8
    target_free: np.ndarray  # H x W, before targets and noise
    centers: list = field(default_factory=list)
    sigmas: list = field(default_factory=list)
    amplitudes: list = field(default_factory=list)


def _grid(h: int, w: int):
    return np.mgrid[0:h, 0:w].astype(np.float64)


def _background(spec: SceneSpec, rng: SeededRng) -> np.ndarray:
    h, w = spec.height, spec.width
    rr, cc = _grid(h, w)
    bg = np.full((h, w), 0.25)
    for _ in range(spec.n_low):
        period = rng.uniform(1, h / 4, 2 * h)[0]
        theta, phase = rng.uniform(1, 0, np.pi)[0], rng.uniform(1, 0, 2 * np.pi)[0]
        amp = rng.uniform(1, 0.02, 0.06)[0]
        bg += amp * np.cos(2 * np.pi * (rr * np.cos(theta) + cc * np.sin(theta)) / period + phase)
    floor = rng.normal(h * w, std=0.03).reshape(h, w)
    bg += ndimage.gaussian_filter(floor, 1.5, mode="reflect")
    return np.clip(bg, 0.02, 0.45)


def _soft_step(d: np.ndarray, width: float = 0.5) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(d / width))


def _clutter(spec: SceneSpec, rng: SeededRng) -> np.ndarray:
    h, w = spec.height, spec.width
    rr, cc = _grid(h, w)
    lo, hi = spec.clutter_amplitude
    out = np.zeros((h, w))
    for _ in range(spec.edges):
        theta = rng.uniform(1, 0, np.pi)[0]
        r0, c0 = rng.uniform(1, 0, h)[0], rng.uniform(1, 0, w)[0]
        d = (rr - r0) * np.cos(theta) + (cc - c0) * np.sin(theta)
        out += rng.uniform(1, lo, hi)[0] * _soft_step(d)
    for _ in range(spec.corners):
        r0, c0 = rng.uniform(1, 4, h - 4)[0], rng.uniform(1, 4, w - 4)[0]
        a1 = rng.uniform(1, 0, 2 * np.pi)[0]
        a2 = a1 + rng.uniform(1, np.pi / 3, 2 * np.pi / 3)[0]
        reach = rng.uniform(1, 8, 20)[0]
        dr, dc = rr - r0, cc - c0
        # inside the wedge between directions a1 and a2, out to `reach`
        s1 = np.cos(a1) * dc - np.sin(a1) * dr
        s2 = np.cos(a2) * dc - np.sin(a2) * dr
        wedge = _soft_step(-s1) * _soft_step(s2) * _soft_step(reach - np.hypot(dr, dc))
        out += rng.uniform(1, lo, hi)[0] * wedge
    for _ in range(spec.blobs):
        r0, c0 = rng.uniform(1, 0, h)[0], rng.uniform(1, 0, w)[0]
        radius = rng.uniform(1, 3, 6)[0]
        out += rng.uniform(1, lo, hi)[0] * _soft_step(radius - np.hypot(rr - r0, cc - c0))
    for _ in range(spec.clouds):
        field_ = ndimage.gaussian_filter(rng.normal(h * w).reshape(h, w), 3.0, mode="wrap")
        field_ /= field_.std() + 1e-12
        r0, c0 = rng.uniform(1, 0, h)[0], rng.uniform(1, 0, w)[0]
        extent = rng.uniform(1, 6, 14)[0]
        window = _soft_step(extent - np.hypot(rr - r0, cc - c0), 2.0)
        broken = (field_ > 0.6).astype(np.float64) * window
        out += rng.uniform(1, lo, hi)[0] * ndimage.gaussian_filter(broken, 0.7)
    return out


def _place_targets(spec: SceneSpec, rng: SeededRng, count: int) -> list:
    h, w = spec.height, spec.width
    centers: list = []
    attempts = 0
    while len(centers) < count:
        attempts += 1
        if attempts > 1000:
            raise GenerationError(f"could not place {count} targets in {h}x{w} after 1000 attempts")
        r = rng.integers(BORDER, h - 1 - BORDER)
        c = rng.integers(BORDER, w - 1 - BORDER)
        if all((r - a) ** 2 + (c - b) ** 2 >= MIN_SEPARATION**2 for a, b in centers):
            centers.append((r, c))
    return centers


def add_salt_pepper(image: np.ndarray, p: float, rng: SeededRng) -> np.ndarray:
    """Each pixel turns 1 with probability p/2 and 0 with probability p/2."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"salt-and-pepper density {p} outside [0, 1]")
    img = np.array(image, dtype=np.float64, copy=True)
    if p == 0.0:
        return img
    u = rng.uniform(img.size).reshape(img.shape)
    img[u < p / 2] = 1.0
    img[(u >= p / 2) & (u < p)] = 0.0
    return img


def compose_scene(spec: SceneSpec) -> Scene:
    """Generate a scene and keep its intermediate layers."""
    spec.validate()
    rng = SeededRng(spec.seed)
    h, w = spec.height, spec.width
    target_free = np.clip(_background(spec, rng) + _clutter(spec, rng), 0.0, TARGET_FREE_CAP)
    count = rng.integers(spec.targets_min, spec.targets_max)
    centers = _place_targets(spec, rng, count)
    rr, cc = _grid(h, w)
    targets = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=np.uint8)
    sigmas, amps = [], []
    for r, c in centers:
        sigma = rng.uniform(1, *spec.sigma_range)[0]
        amp = rng.uniform(1, *spec.amplitude_range)[0]
        blob = amp * np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * sigma**2))
        targets += blob
        mask[blob >= 0.5 * amp] = 1
        sigmas.append(sigma)
        amps.append(amp)
    image = np.clip(target_free + targets, 0.0, 1.0)
    if spec.noise_density > 0:
        image = add_salt_pepper(image, spec.noise_density, rng)
    return Scene(image[None], mask, target_free, centers, sigmas, amps)


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """``(image 1 x H x W, mask H x W)``; deterministic in ``spec.seed``."""
    s = compose_scene(spec)
    return s.image, s.mask


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 16-bit grid used on disk, so in-memory and stored data agree."""
    return np.rint(np.clip(image, 0.0, 1.0) * 65535) / 65535


@dataclass
class Dataset:
    images: list
    masks: list
    specs: list
    seed: int = 0

    def __len__(self) -> int:
        return len(self.images)

    def arrays(self, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
        return np.stack(self.images).astype(dtype), np.stack(self.masks).astype(dtype)


def generate_dataset(n: int, base_spec: SceneSpec, seed: int) -> Dataset:
    """``n`` scenes whose seeds are successive SplitMix64 outputs of ``seed``."""
    if n < 1:
        raise ValueError("dataset needs at least one scene")
    images, masks, specs = [], [], []
    for s in derive_seeds(seed, n):
        spec = replace(base_spec, seed=s)
        img, mask = generate_scene(spec)
        images.append(quantize(img))
        masks.append(mask)
        specs.append(spec)
    return Dataset(images, masks, specs, seed)


def with_noise(ds: Dataset, p: float, seed: int) -> Dataset:
    """Copy of ``ds`` with salt-and-pepper noise on every image."""
    out = []
    for img, s in zip(ds.images, derive_seeds(seed, len(ds))):
        out.append(add_salt_pepper(img, p, SeededRng(s)))
    return Dataset(out, list(ds.masks), list(ds.specs), ds.seed)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def write_dataset(ds: Dataset, out_dir) -> Path:
    """Write ``images/NNNN.pgm``, ``masks/NNNN.pgm`` and ``manifest.txt``."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        lines = [f"dataset scenes = {len(ds)}", f"dataset seed = {ds.seed}", ""]
        for i, (img, mask, spec) in enumerate(zip(ds.images, ds.masks, ds.specs)):
            name = f"{i:04d}.pgm"
            save_image(out / "images" / name, img[0])
            save_mask(out / "masks" / name, mask)
            lines.append(f"scene {i}")
            lines.append(f"image = images/{name}")
            lines.append(f"mask = masks/{name}")
            lines.extend(f"{k} = {_fmt(v)}" for k, v in asdict(spec).items())
            lines.append("")
        (out / "manifest.txt").write_text("\n".join(lines))
    except OSError as exc:
        raise OSError(f"{out}: {exc.strerror or exc}") from exc
    return out / "manifest.txt"


def read_manifest(path) -> tuple[dict, list]:
    """Returns ``(header, scenes)``, each scene a dict of its key-value lines."""
    header, scenes, cur = {}, [], None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            cur = None
            continue
        if line.startswith("scene "):
            cur = {"index": int(line.split()[1])}
            scenes.append(cur)
            continue
        key, _, val = line.partition(" = ")
        if cur is None:
            header[key.replace("dataset ", "")] = val
        else:
            cur[key] = val
    return header, scenes


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest}: no dataset manifest")
    header, scenes = read_manifest(manifest)
    images = [load_image(d / s["image"])[None] for s in scenes]
    masks = [load_mask(d / s["mask"]) for s in scenes]
    return Dataset(images, masks, scenes, int(header.get("seed", 0)))
