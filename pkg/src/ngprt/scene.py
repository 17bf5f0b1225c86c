"""Posed datasets, synthetic box scenes with exact ground truth, and metrics.

Cameras follow the pinhole convention with ``x`` right, ``y`` down and ``z``
forward in camera space; ``c2w`` is a 4x4 camera-to-world matrix.  A pixel
coordinate ``(u, v)`` is continuous, so the centre of pixel ``(i, j)`` is
``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from PIL import Image

from ngprt.errors import ConfigError, DomainError, LoadError, ShapeError

TRANSFORMS_FORMAT = "ngprt-transforms"
TRANSFORMS_VERSION = 1
PSNR_CAP = 99.0


# synthetic scenes ----------------------------------------------------------


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    sigma: float
    rgb: np.ndarray
    tint: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.tint = np.broadcast_to(np.asarray(self.tint, dtype=np.float64), (3,)).copy()
        if np.any(self.hi <= self.lo):
            raise ShapeError("box needs hi > lo on every axis")
        if np.any(self.lo < -1.0) or np.any(self.hi > 1.0):
            raise DomainError("box must lie inside the [-1, 1]^3 region of interest")
        if self.sigma < 0:
            raise ValueError("box density must be non-negative")


@dataclass
class SynthScene:
    """Axis-aligned boxes of constant density; colour gets a view tint ``tint * d_z``."""

    boxes: list[Box]
    name: str = "custom"

    def packed(self):
        if not self.boxes:
            z = np.zeros((0, 3))
            return z, z, np.zeros(0), z, z
        return (
            np.stack([b.lo for b in self.boxes]),
            np.stack([b.hi for b in self.boxes]),
            np.array([b.sigma for b in self.boxes], dtype=np.float64),
            np.stack([b.rgb for b in self.boxes]),
            np.stack([b.tint for b in self.boxes]),
        )

    def box_colors(self, dirs: np.ndarray) -> np.ndarray:
        """Per-ray, per-box colour ``(R, B, 3)`` after the view tint and clamp."""
        lo, hi, sig, rgb, tint = self.packed()
        dz = np.atleast_2d(dirs)[:, 2]
        return np.clip(rgb[None] + tint[None] * dz[:, None, None], 0.0, 1.0)

    def query(self, x: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Density and density-weighted colour at points, one direction per point."""
        x = np.atleast_2d(x)
        lo, hi, sig, rgb, tint = self.packed()
        inside = np.all((x[:, None] >= lo[None]) & (x[:, None] < hi[None]), axis=2)
        s = inside * sig[None]
        sigma = s.sum(axis=1)
        col = np.einsum("nb,nbc->nc", s, self.box_colors(dirs))
        safe = np.where(sigma > 0, sigma, 1.0)
        return sigma, col / safe[:, None]

    def voxelize(self, resolution: int) -> np.ndarray:
        """Bit grid of voxels that overlap a box with positive density."""
        occ = np.zeros((resolution,) * 3, dtype=bool)
        for b in self.boxes:
            if b.sigma <= 0:
                continue
            i0 = np.floor((b.lo + 1.0) * 0.5 * resolution).astype(int)
            i1 = np.ceil((b.hi + 1.0) * 0.5 * resolution).astype(int)
            i0 = np.clip(i0, 0, resolution - 1)
            i1 = np.clip(i1, i0 + 1, resolution)
            occ[i0[0] : i1[0], i0[1] : i1[1], i0[2] : i1[2]] = True
        return occ


def slab_scene() -> SynthScene:
    """Thin slab through the middle of the ROI: about 2% of 512^3 voxels."""
    return SynthScene([Box((-1, -1, -0.02), (1, 1, 0.02), 50.0, (0.7, 0.5, 0.3))], name="synth_slab")


def desk_scene() -> SynthScene:
    """A table top with a few coloured blocks, one of them semi-transparent."""
    boxes = [
        Box((-0.9, -0.9, -0.6), (0.9, 0.9, -0.5), 40.0, (0.55, 0.45, 0.35), 0.05),
        Box((-0.6, -0.5, -0.5), (-0.2, -0.1, 0.0), 40.0, (0.8, 0.2, 0.2), (0.15, 0.1, 0.1)),
        Box((0.1, -0.6, -0.5), (0.4, -0.3, 0.4), 40.0, (0.2, 0.7, 0.3), (0.0, 0.15, 0.0)),
        Box((0.0, 0.2, -0.5), (0.6, 0.7, -0.3), 40.0, (0.2, 0.3, 0.8), (0.1, 0.1, 0.2)),
        Box((-0.5, 0.3, -0.5), (-0.2, 0.6, -0.2), 5.0, (0.9, 0.8, 0.2), 0.0),
    ]
    return SynthScene(boxes, name="desk")


SCENES = {"synth_slab": slab_scene, "desk": desk_scene}


def get_scene(name: str) -> SynthScene:
    try:
        return SCENES[name]()
    except KeyError:
        raise ConfigError(f"unknown scene {name!r}; choose from {sorted(SCENES)}") from None


# exact and numerical ground truth -----------------------------------------


@numba.njit(cache=True)
def _box_span(o, d, lo, hi):
    t0 = -np.inf
    t1 = np.inf
    for a in range(3):
        if d[a] != 0.0:
            ta = (lo[a] - o[a]) / d[a]
            tb = (hi[a] - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
        elif o[a] < lo[a] or o[a] >= hi[a]:
            return 1.0, 0.0
    return t0, t1


@numba.njit(cache=True)
def _oracle_kernel(origins, dirs, tnear, tfar, lo, hi, sig, col):
    n_rays = origins.shape[0]
    nb = lo.shape[0]
    out = np.zeros((n_rays, 3))
    trans = np.ones(n_rays)
    span = np.empty((nb, 2))
    for r in range(n_rays):
        o = origins[r]
        d = dirs[r]
        cuts = np.empty(2 * nb + 2)
        m = 0
        cuts[m] = tnear[r]
        m += 1
        cuts[m] = tfar[r]
        m += 1
        for b in range(nb):
            t0, t1 = _box_span(o, d, lo[b], hi[b])
            span[b, 0] = t0
            span[b, 1] = t1
            for t in (t0, t1):
                if tnear[r] < t < tfar[r]:
                    cuts[m] = t
                    m += 1
        cuts = np.sort(cuts[:m])
        T = 1.0
        for k in range(m - 1):
            a = cuts[k]
            b_ = cuts[k + 1]
            if b_ <= a:
                continue
            mid = 0.5 * (a + b_)
            s = 0.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            for b in range(nb):
                if span[b, 0] <= mid < span[b, 1]:
                    s += sig[b]
                    c0 += sig[b] * col[r, b, 0]
                    c1 += sig[b] * col[r, b, 1]
                    c2 += sig[b] * col[r, b, 2]
            if s <= 0.0:
                continue
            att = np.exp(-s * (b_ - a))
            w = T * (1.0 - att) / s
            out[r, 0] += w * c0
            out[r, 1] += w * c1
            out[r, 2] += w * c2
            T *= att
        trans[r] = T
    return out, trans


@numba.njit(cache=True)
def _quadrature_kernel(origins, dirs, tnear, tfar, lo, hi, sig, col, n):
    n_rays = origins.shape[0]
    nb = lo.shape[0]
    out = np.zeros((n_rays, 3))
    for r in range(n_rays):
        # the integrand vanishes outside the boxes, so spend the samples on their hull
        a0 = tfar[r]
        a1 = tnear[r]
        for b in range(nb):
            t0, t1 = _box_span(origins[r], dirs[r], lo[b], hi[b])
            if sig[b] > 0.0 and t1 > t0:
                a0 = min(a0, max(t0, tnear[r]))
                a1 = max(a1, min(t1, tfar[r]))
        h = (a1 - a0) / n
        if h <= 0:
            continue
        T = 1.0
        for k in range(n):
            t = a0 + (k + 0.5) * h
            s = 0.0
            c = np.zeros(3)
            for b in range(nb):
                inside = True
                for a in range(3):
                    p = origins[r, a] + t * dirs[r, a]
                    if p < lo[b, a] or p >= hi[b, a]:
                        inside = False
                if inside:
                    s += sig[b]
                    c += sig[b] * col[r, b]
            if s > 0.0:
                alpha = 1.0 - np.exp(-s * h)
                out[r] += T * alpha * c / s
                T *= 1.0 - alpha
    return out


def oracle_render(scene: SynthScene, origins, dirs, tnear, tfar, quadrature_n: int | None = None) -> np.ndarray:
    """Ground-truth colour of rays through a box scene, black background.

    Media are piecewise constant along a ray, so each segment between box
    entry/exit points contributes ``T (1 - exp(-sigma len)) c`` exactly.  With
    ``quadrature_n`` the integral is instead approximated by that many
    midpoint samples (a numerical cross-check of the closed form).
    """
    origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
    tnear = np.atleast_1d(np.asarray(tnear, dtype=np.float64))
    tfar = np.atleast_1d(np.asarray(tfar, dtype=np.float64))
    lo, hi, sig, _, _ = scene.packed()
    col = np.ascontiguousarray(scene.box_colors(dirs)) if len(sig) else np.zeros((len(origins), 0, 3))
    if quadrature_n is not None:
        if quadrature_n < 1024:
            raise ValueError("quadrature needs at least 1024 samples")
        return _quadrature_kernel(origins, dirs, tnear, tfar, lo, hi, sig, col, int(quadrature_n))
    rgb, _ = _oracle_kernel(origins, dirs, tnear, tfar, lo, hi, sig, col)
    return rgb


# cameras and rays -----------------------------------------------------------


def roi_span(origins, dirs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(tnear, tfar, hit)`` of rays against the [-1, 1]^3 box, with ``tnear >= 0``."""
    o = np.atleast_2d(origins)
    d = np.atleast_2d(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (-1.0 - o) * inv
        tb = (1.0 - o) * inv
    t0 = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
    t1 = np.where(np.isnan(tb), np.inf, np.maximum(ta, tb))
    # axis-parallel rays: inside the slab means unbounded, outside means a miss
    par = d == 0
    outside = par & (np.abs(o) > 1.0)
    t0 = np.where(par, -np.inf, t0)
    t1 = np.where(par, np.inf, t1)
    tnear = np.maximum(t0.max(axis=1), 0.0)
    tfar = t1.min(axis=1)
    hit = (tfar > tnear) & ~outside.any(axis=1)
    return tnear, tfar, hit


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(fwd, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, down, fwd, eye
    return c2w


def sphere_poses(n: int, radius: float, rng: np.random.Generator, min_elev=10.0, max_elev=70.0) -> list[np.ndarray]:
    """Cameras on the upper part of a sphere looking at the origin."""
    az = rng.uniform(0.0, 2 * np.pi, n)
    el = np.radians(rng.uniform(min_elev, max_elev, n))
    eyes = radius * np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)
    return [look_at(e) for e in eyes]


@dataclass
class Frame:
    c2w: np.ndarray
    image: np.ndarray | None = None  # (H, W, 3) floats in [0, 1]
    file: str = ""
    split: str = "train"


@dataclass
class PosedDataset:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    frames: list[Frame] = field(default_factory=list)

    def __post_init__(self) -> None:
        for f in self.frames:
            f.c2w = np.asarray(f.c2w, dtype=np.float64)
            if f.c2w.shape != (4, 4) or abs(np.linalg.det(f.c2w)) < 1e-12:
                raise ShapeError("camera matrices must be invertible 4x4")
            if f.image is not None and f.image.shape[:2] != (self.height, self.width):
                raise ShapeError(f"image {f.file!r} is {f.image.shape[:2]}, header says {(self.height, self.width)}")

    def split(self, name: str) -> list[int]:
        return [k for k, f in enumerate(self.frames) if f.split == name]

    def pixel_grid(self) -> np.ndarray:
        j, i = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([i.ravel() + 0.5, j.ravel() + 0.5], axis=1)

    def project(self, frame: int, points: np.ndarray) -> np.ndarray:
        """World points to continuous pixel coordinates."""
        w2c = np.linalg.inv(self.frames[frame].c2w)
        p = np.atleast_2d(points) @ w2c[:3, :3].T + w2c[:3, 3]
        return np.stack([self.fx * p[:, 0] / p[:, 2] + self.cx, self.fy * p[:, 1] / p[:, 2] + self.cy], axis=1)


def generate_rays(ds: PosedDataset, frame: int, pixels) -> dict[str, np.ndarray]:
    """Rays through continuous pixel coordinates ``(N, 2)`` of one frame.

    Returns origins, unit directions, the ROI span and a ``hit`` flag; rays
    that miss the ROI keep ``tnear = tfar`` and are meant to be skipped.
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if np.any(px < 0) or np.any(px[:, 0] > ds.width) or np.any(px[:, 1] > ds.height):
        raise DomainError("pixel outside the image")
    c2w = ds.frames[frame].c2w
    cam = np.stack([(px[:, 0] - ds.cx) / ds.fx, (px[:, 1] - ds.cy) / ds.fy, np.ones(len(px))], axis=1)
    dirs = cam @ c2w[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(c2w[:3, 3], dirs.shape).copy()
    tnear, tfar, hit = roi_span(origins, dirs)
    tfar = np.where(hit, tfar, tnear)
    return dict(origins=origins, dirs=dirs, tnear=tnear, tfar=tfar, hit=hit)


def frame_rays(ds: PosedDataset, frame: int) -> dict[str, np.ndarray]:
    """Rays through every pixel centre of a frame, row-major."""
    return generate_rays(ds, frame, ds.pixel_grid())


def synth_dataset(
    scene: SynthScene,
    n_train: int = 50,
    n_test: int = 10,
    size: int = 128,
    fov_deg: float = 45.0,
    radius: float = 3.0,
    seed: int = 0,
) -> PosedDataset:
    """Render a posed dataset of ``scene`` with the closed-form oracle."""
    rng = np.random.default_rng(seed)
    f = 0.5 * size / np.tan(np.radians(fov_deg) / 2)
    poses = sphere_poses(n_train + n_test, radius, rng)
    ds = PosedDataset(size, size, f, f, size / 2, size / 2)
    for k, c2w in enumerate(poses):
        ds.frames.append(Frame(c2w, split="train" if k < n_train else "test", file=f"images/{k:03d}.png"))
    for k in range(len(ds.frames)):
        r = frame_rays(ds, k)
        rgb = oracle_render(scene, r["origins"], r["dirs"], r["tnear"], r["tfar"])
        ds.frames[k].image = rgb.reshape(size, size, 3).astype(np.float32)
    return ds


# dataset files --------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_dataset(ds: PosedDataset, root) -> Path:
    """Write images as 8-bit PNG plus a ``transforms.json`` document."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    frames = []
    for f in ds.frames:
        if f.image is not None:
            save_image(root / f.file, f.image)
        frames.append({"file": f.file, "split": f.split, "c2w": f.c2w.tolist()})
    doc = {
        "format": TRANSFORMS_FORMAT,
        "version": TRANSFORMS_VERSION,
        "width": ds.width,
        "height": ds.height,
        "fx": ds.fx,
        "fy": ds.fy,
        "cx": ds.cx,
        "cy": ds.cy,
        "frames": frames,
    }
    path = root / "transforms.json"
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def load_dataset(root, with_images: bool = True) -> PosedDataset:
    root = Path(root)
    path = root / "transforms.json" if root.is_dir() else root
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if doc.get("format") != TRANSFORMS_FORMAT or doc.get("version") != TRANSFORMS_VERSION:
        raise LoadError(f"{path} is not a version {TRANSFORMS_VERSION} transforms file")
    frames = []
    for fr in doc["frames"]:
        img = load_image(path.parent / fr["file"]) if with_images else None
        frames.append(Frame(np.array(fr["c2w"], dtype=np.float64), img, fr["file"], fr.get("split", "train")))
    return PosedDataset(doc["width"], doc["height"], doc["fx"], doc["fy"], doc["cx"], doc["cy"], frames)


# metrics ----------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio of images in [0, 1], capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))
