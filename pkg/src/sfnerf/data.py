"""Photo-collection datasets on disk and a synthetic scene generator with known occluders.

Dataset directory layout::

    images/       one file per image (.png, .jpg or float .npy, H x W x 3)
    cameras.txt   one record per image:
                  name fx fy cx cy r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2 near far
                  (row-major 3x4 world-from-camera pose, camera looks down -z)
    split.txt     optional, lines "train <ids...>" and "test <ids...>" (0-based record order)
    masks/        optional occluder masks, <stem>.png, nonzero = occluded
    clean/        optional occluder-free, jitter-free references (.npy)
    features/     optional precomputed backbone features, <stem>.feat
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .exceptions import ConfigError, IngestionError
from .geometry import Camera, Rays, generate_rays

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".npy", ".png", ".jpg", ".jpeg")


@dataclass
class SceneDataset:
    images: list[np.ndarray]
    cameras: list[Camera]
    names: list[str]
    train_ids: list[int]
    test_ids: list[int] = field(default_factory=list)
    masks: list[np.ndarray] | None = None
    clean: list[np.ndarray] | None = None
    feature_dir: Path | None = None

    def __post_init__(self):
        n = len(self.images)
        if len(self.cameras) != n or len(self.names) != n:
            raise IngestionError(f"{n} images but {len(self.cameras)} cameras and {len(self.names)} names")
        ids = set(self.train_ids) | set(self.test_ids)
        if set(self.train_ids) & set(self.test_ids):
            raise IngestionError("train and test splits overlap")
        if any(i < 0 or i >= n for i in ids):
            raise IngestionError("split id out of range")
        for i, (img, cam) in enumerate(zip(self.images, self.cameras)):
            if img.shape != (cam.height, cam.width, 3):
                raise IngestionError(f"{self.names[i]}: image {img.shape} does not match camera {cam.height}x{cam.width}")
        for extra in ("masks", "clean"):
            arrs = getattr(self, extra)
            if arrs is None:
                continue
            if len(arrs) != n:
                raise IngestionError(f"{len(arrs)} {extra} for {n} images")
            for i, a in enumerate(arrs):
                if a.shape[:2] != self.images[i].shape[:2]:
                    raise IngestionError(f"{self.names[i]}: {extra} shape {a.shape} does not match image")

    def __len__(self):
        return len(self.images)

    def rays(self, image_id: int, dtype=torch.float64) -> Rays:
        return generate_rays(self.cameras[image_id], image_id=image_id, dtype=dtype)


# --------------------------------------------------------------------------
# Reading and writing


def _read_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        img = np.load(path).astype(np.float32)
    else:
        with Image.open(path) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    if img.ndim != 3 or img.shape[-1] != 3:
        raise IngestionError(f"{path.name}: expected an H x W x 3 image, got {img.shape}")
    return img


def _read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def _downsample(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    h, w = img.shape[0] // factor, img.shape[1] // factor
    crop = img[: h * factor, : w * factor]
    return crop.reshape(h, factor, w, factor, *img.shape[2:]).mean(axis=(1, 3), dtype=np.float64).astype(img.dtype)


def parse_cameras(path: Path, image_size: dict[str, tuple[int, int]]) -> tuple[list[str], list[Camera]]:
    names, cams = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 19:
            raise IngestionError(f"{path.name}:{lineno}: expected 19 fields, got {len(tok)}")
        name = tok[0]
        if name not in image_size:
            raise IngestionError(f"camera record for {name!r} has no image in images/")
        vals = [float(x) for x in tok[1:]]
        fx, fy, cx, cy = vals[:4]
        pose = np.array(vals[4:16]).reshape(3, 4)
        h, w = image_size[name]
        try:
            cams.append(Camera(fx, fy, cx, cy, pose, h, w, vals[16], vals[17]))
        except ValueError as err:
            raise IngestionError(f"{path.name}:{lineno} ({name}): {err}") from err
        names.append(name)
    return names, cams


def format_camera(name: str, cam: Camera) -> str:
    nums = [cam.fx, cam.fy, cam.cx, cam.cy, *cam.pose.ravel(), cam.near, cam.far]
    return " ".join([name] + [repr(float(x)) for x in nums])


def parse_split(path: Path, n: int) -> tuple[list[int], list[int]]:
    train, test = [], []
    for line in path.read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] not in ("train", "test"):
            raise IngestionError(f"{path.name}: unknown split {tok[0]!r}")
        (train if tok[0] == "train" else test).extend(int(x) for x in tok[1:])
    return train, test


def load_photocollection(
    directory,
    factor: int = 2,
    train_ids: list[int] | None = None,
    num_train: int | None = None,
    seed: int = 0,
) -> SceneDataset:
    """Load a dataset directory, box-downsampling images by ``factor``.

    ``train_ids`` overrides the split file; ``num_train`` keeps a seeded uniform
    subset of the training ids (few-shot setting).
    """
    directory = Path(directory)
    img_dir = directory / "images"
    cam_file = directory / "cameras.txt"
    if not img_dir.is_dir() or not cam_file.exists():
        raise IngestionError(f"{directory} must contain images/ and cameras.txt")
    if factor < 1:
        raise ConfigError("downsampling factor must be >= 1")

    files = {p.name: p for p in sorted(img_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    raw = {name: _read_image(p) for name, p in files.items()}
    names, cams = parse_cameras(cam_file, {k: v.shape[:2] for k, v in raw.items()})
    missing = sorted(set(files) - set(names))
    if missing:
        raise IngestionError(f"image {missing[0]!r} has no camera record in cameras.txt")

    images = [_downsample(raw[n], factor) for n in names]
    cams = [c.scaled(factor) if factor != 1 else c for c in cams]
    stems = [Path(n).stem for n in names]

    masks = None
    if (directory / "masks").is_dir():
        masks = []
        for s, img in zip(stems, images):
            p = directory / "masks" / f"{s}.png"
            if not p.exists():
                raise IngestionError(f"missing mask {p.name}")
            masks.append(_downsample(_read_mask(p).astype(np.float32), factor) >= 0.5)
    clean = None
    if (directory / "clean").is_dir():
        clean = [_downsample(_read_image(directory / "clean" / f"{s}.npy"), factor) for s in stems]

    split_file = directory / "split.txt"
    if train_ids is not None:
        train = list(train_ids)
        test = [i for i in range(len(names)) if i not in set(train)]
    elif split_file.exists():
        train, test = parse_split(split_file, len(names))
    else:
        train, test = list(range(len(names))), []
    if num_train is not None:
        if num_train > len(train):
            raise ConfigError(f"requested {num_train} training images but only {len(train)} available")
        rng = np.random.default_rng(seed)
        train = sorted(rng.choice(train, size=num_train, replace=False).tolist())

    feature_dir = directory / "features"
    return SceneDataset(
        images=images,
        cameras=cams,
        names=stems,
        train_ids=train,
        test_ids=test,
        masks=masks,
        clean=clean,
        feature_dir=feature_dir if feature_dir.is_dir() else None,
    )


def save_image(path: Path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, np.asarray(img, dtype=np.float32))
    else:
        arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(path)


def export_dataset(dataset: SceneDataset, directory, image_format: str = "npy") -> Path:
    """Write ``dataset`` in the directory layout above (images as float ``.npy`` by default)."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for name, img, cam in zip(dataset.names, dataset.images, dataset.cameras):
        fname = f"{name}.{image_format}"
        save_image(directory / "images" / fname, img)
        lines.append(format_camera(fname, cam))
    (directory / "cameras.txt").write_text("\n".join(lines) + "\n")
    split = "train " + " ".join(map(str, dataset.train_ids)) + "\n"
    if dataset.test_ids:
        split += "test " + " ".join(map(str, dataset.test_ids)) + "\n"
    (directory / "split.txt").write_text(split)
    if dataset.masks is not None:
        (directory / "masks").mkdir(exist_ok=True)
        for name, m in zip(dataset.names, dataset.masks):
            Image.fromarray(np.asarray(m, dtype=np.uint8) * 255).save(directory / "masks" / f"{name}.png")
    if dataset.clean is not None:
        (directory / "clean").mkdir(exist_ok=True)
        for name, c in zip(dataset.names, dataset.clean):
            np.save(directory / "clean" / f"{name}.npy", np.asarray(c, dtype=np.float32))
    return directory


# --------------------------------------------------------------------------
# Synthetic scenes


@dataclass
class Primitive:
    kind: str  # "sphere" | "box"
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # radius in x for spheres, half extents for boxes
    color: tuple[float, float, float]
    stripes: float = 0.0  # amplitude of a procedural stripe texture
    rounding: float = 0.0  # edge radius for boxes; keeps shading normals continuous near the surface


def default_primitives() -> list[Primitive]:
    return [
        Primitive("box", (0.0, -0.64, 0.0), (0.95, 0.15, 0.95), (0.75, 0.7, 0.6), stripes=0.25, rounding=0.12),
        Primitive("sphere", (-0.35, -0.15, 0.2), (0.32, 0, 0), (0.85, 0.25, 0.2), stripes=0.15),
        Primitive("box", (0.35, -0.25, -0.25), (0.2, 0.25, 0.2), (0.2, 0.45, 0.85), rounding=0.12),
        Primitive("sphere", (0.3, -0.3, 0.45), (0.18, 0, 0), (0.25, 0.75, 0.3), stripes=0.2),
    ]


@dataclass
class SyntheticSpec:
    num_train: int = 15
    num_test: int = 5
    height: int = 64
    width: int = 64
    fov_degrees: float = 45.0
    ring_radius: float = 2.6
    ring_height: float = 1.1
    near: float = 1.0
    far: float = 4.5
    primitives: list[Primitive] = field(default_factory=default_primitives)
    density: float = 40.0
    softness: float = 0.02
    bound: float = 1.2  # field is zero outside [-bound, bound]^3
    light: tuple[float, float, float] = (0.4, 0.8, 0.45)
    ambient: float = 0.35
    occluders_min: int = 3
    occluders_max: int = 5
    occluder_size: tuple[float, float] = (0.12, 0.3)  # side as a fraction of the image
    occluder_saturation: float = 0.8
    jitter: float = 0.15  # per-channel gain drawn from [1 - jitter, 1 + jitter]
    quadrature: int = 4096

    def __post_init__(self):
        if self.num_train < 1:
            raise ConfigError("need at least one training image")
        if self.occluders_min < 0 or self.occluders_max < self.occluders_min:
            raise ConfigError("occluder count range is invalid")
        if not 0 <= self.jitter < 1:
            raise ConfigError("jitter must be in [0, 1)")


def _sdf_and_normal(p: torch.Tensor, prim: Primitive) -> tuple[torch.Tensor, torch.Tensor]:
    rel = p - torch.tensor(prim.center, dtype=p.dtype)
    if prim.kind == "sphere":
        dist = rel.norm(dim=-1)
        return dist - prim.size[0], rel / dist.clamp_min(1e-12)[..., None]
    if prim.kind == "box":
        q = rel.abs() - (torch.tensor(prim.size, dtype=p.dtype) - prim.rounding)
        outside = q.clamp_min(0)
        out_norm = outside.norm(dim=-1)
        qmax, axis = q.max(-1)
        sdf = out_norm + qmax.clamp_max(0) - prim.rounding
        inner = torch.nn.functional.one_hot(axis, 3).to(p.dtype)
        direction = torch.where((qmax > 0)[..., None], outside / out_norm.clamp_min(1e-12)[..., None], inner)
        return sdf, direction * torch.sign(rel)
    raise ConfigError(f"unknown primitive {prim.kind!r}")


def analytic_field(points: torch.Tensor, spec: SyntheticSpec) -> tuple[torch.Tensor, torch.Tensor]:
    """Density and Lambertian color of the synthetic scene at ``points`` (..., 3).

    Each primitive is a soft solid, ``density * sigmoid(-sdf / softness)``; the
    color is the density-weighted mix of the primitives' shaded albedos.  The
    field is exactly zero outside ``[-bound, bound]^3``.
    """
    light = torch.tensor(spec.light, dtype=points.dtype)
    light = light / light.norm()
    dens, cols = [], []
    for prim in spec.primitives:
        d, normal = _sdf_and_normal(points, prim)
        dens.append(spec.density * torch.sigmoid(-d / spec.softness))
        shade = spec.ambient + (1 - spec.ambient) * (normal @ light).clamp_min(0)
        albedo = torch.tensor(prim.color, dtype=points.dtype).expand(points.shape)
        if prim.stripes:
            wave = torch.sin(12.0 * points[..., 0]) * torch.sin(12.0 * points[..., 2])
            albedo = albedo * (1 - prim.stripes * (0.5 + 0.5 * wave))[..., None]
        cols.append(albedo * shade[..., None])
    dens = torch.stack(dens, -1)
    total = dens.sum(-1)
    weights = dens / total.clamp_min(1e-30)[..., None]
    color = (weights[..., None] * torch.stack(cols, -2)).sum(-2)
    inside = (points.abs() <= spec.bound).all(-1)
    return total * inside, color.clamp(0, 1)


def render_analytic(
    rays: Rays, spec: SyntheticSpec, num_samples: int | None = None, chunk: int = 512, segment: int = 256
) -> torch.Tensor:
    """Midpoint quadrature of the analytic field on ``num_samples`` uniform intervals of ``[near, far]``.

    Same estimator as :func:`render_ray`, evaluated segment by segment so rays
    stop once their transmittance drops below 1e-12.
    """
    k = num_samples or spec.quadrature
    grid = torch.linspace(0, 1, k + 1, dtype=torch.float64)
    out = []
    for i in range(0, len(rays), chunk):
        r = rays[i : i + chunk]
        n = len(r)
        t = r.near[:, None] + (r.far - r.near)[:, None] * grid
        rgb = torch.zeros(n, 3, dtype=torch.float64)
        log_trans = torch.zeros(n, dtype=torch.float64)
        alive = torch.arange(n)
        for s0 in range(0, k, segment):
            if len(alive) == 0:
                break
            ts = t[alive, s0 : s0 + segment + 1]
            mid = (ts[:, 1:] + ts[:, :-1]) / 2
            pts = r.origins[alive, None] + mid[..., None] * r.directions[alive, None]
            inside = (pts.abs() <= spec.bound).all(-1)
            if not inside.any():
                continue
            density = torch.zeros(mid.shape, dtype=torch.float64)
            color = torch.zeros(mid.shape + (3,), dtype=torch.float64)
            density[inside], color[inside] = analytic_field(pts[inside], spec)
            tau = density * (ts[:, 1:] - ts[:, :-1])
            acc = torch.cumsum(tau, -1)
            trans = torch.exp(log_trans[:, None] - torch.cat([torch.zeros_like(acc[:, :1]), acc[:, :-1]], -1))
            w = trans * (1 - torch.exp(-tau))
            rgb[alive] += (w[..., None] * color).sum(-2)
            log_trans = log_trans - acc[:, -1]
            keep = log_trans > np.log(1e-12)
            alive, log_trans = alive[keep], log_trans[keep]
        out.append(rgb)
    return torch.cat(out)


def _ring_cameras(spec: SyntheticSpec, count: int, phase: float, rng: np.random.Generator, wobble: float) -> list[Camera]:
    f = 0.5 * spec.width / np.tan(np.radians(spec.fov_degrees) / 2)
    cams = []
    for j in range(count):
        az = 2 * np.pi * (j + phase) / count + (rng.uniform(-wobble, wobble) if wobble else 0.0)
        height = spec.ring_height * (1 + (rng.uniform(-0.2, 0.2) if wobble else 0.0))
        eye = (spec.ring_radius * np.cos(az), height, spec.ring_radius * np.sin(az))
        cams.append(
            Camera.look_at(
                eye, (0.0, -0.3, 0.0), (0.0, 1.0, 0.0), f, f, spec.width / 2, spec.height / 2,
                spec.height, spec.width, spec.near, spec.far,
            )
        )
    return cams


def _occluders(spec: SyntheticSpec, rng: np.random.Generator):
    h, w = spec.height, spec.width
    mask = np.zeros((h, w), dtype=bool)
    paint = np.zeros((h, w, 3), dtype=np.float64)
    rows, cols = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(spec.occluders_min, spec.occluders_max + 1))):
        sh = rng.uniform(*spec.occluder_size) * h
        sw = rng.uniform(*spec.occluder_size) * w
        r0 = rng.uniform(0, h - sh)
        c0 = rng.uniform(0, w - sw)
        if rng.uniform() < 0.5:
            shape = (rows + 0.5 >= r0) & (rows + 0.5 < r0 + sh) & (cols + 0.5 >= c0) & (cols + 0.5 < c0 + sw)
        else:
            cr, cc = r0 + sh / 2, c0 + sw / 2
            shape = ((rows + 0.5 - cr) / (sh / 2)) ** 2 + ((cols + 0.5 - cc) / (sw / 2)) ** 2 <= 1
        hue = rng.uniform(0, 6)
        base = np.clip(np.abs(((hue + np.array([0, 4, 2])) % 6) - 3) - 1, 0, 1)
        value = rng.uniform(0.6, 1.0)
        color = value * (1 - spec.occluder_saturation + spec.occluder_saturation * base)
        paint[shape] = color
        mask |= shape
    return mask, paint


def generate_synthetic_scene(spec: SyntheticSpec | None = None, seed: int = 0) -> SceneDataset:
    """Render a ring of views of the analytic scene and composite 2D occluders into the training views.

    Training views get a per-image color gain and hard-edged occluders; test
    views (placed between the training azimuths) are clean.  ``clean`` holds
    the occluder-free, gain-free render of every view.
    """
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(seed)
    cams = _ring_cameras(spec, spec.num_train, 0.0, rng, wobble=0.1) + _ring_cameras(spec, spec.num_test, 0.5, rng, 0.0)

    images, masks, clean = [], [], []
    for i, cam in enumerate(cams):
        ref = render_analytic(generate_rays(cam), spec).numpy().reshape(cam.height, cam.width, 3)
        img = ref.copy()
        mask = np.zeros(ref.shape[:2], dtype=bool)
        if i < spec.num_train:
            if spec.jitter:
                gain = rng.uniform(1 - spec.jitter, 1 + spec.jitter, size=3)
                img = np.clip(img * gain, 0, 1)
            mask, paint = _occluders(spec, rng)
            if mask.mean() > 0.9:
                raise ConfigError(f"occluders cover {mask.mean():.0%} of image {i}; the scene is unlearnable")
            img[mask] = paint[mask]
        images.append(img.astype(np.float32))
        masks.append(mask)
        clean.append(ref.astype(np.float32))
    n = len(cams)
    return SceneDataset(
        images=images,
        cameras=cams,
        names=[f"view_{i:03d}" for i in range(n)],
        train_ids=list(range(spec.num_train)),
        test_ids=list(range(spec.num_train, n)),
        masks=masks,
        clean=clean,
    )
