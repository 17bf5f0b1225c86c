"""Baking a trained model into render-time assets, the baked file format, and rendering.

A baked scene keeps the decoded coarse rows only at lattice corners that
touch an occupied voxel, stored as a sorted map from linear corner index to
row; every other corner reads as zero.  Since samples are only ever taken in
occupied voxels, all corners a sample touches are retained and decoding from
the baked map reproduces the live model exactly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ngprt.config import Config
from ngprt.errors import BakeError, DomainError, LoadError, ShapeError
from ngprt.fusion import Fuser, FusionMode
from ngprt.hashgrid import MultiLevelEncoding
from ngprt.model import NGPRTModel, corner_coords, corner_linear, corner_stencil, fused_features, interpolate_corners, split_decoded
from ngprt.nn import TinyMLP
from ngprt.occupancy import (
    DistanceGrid,
    OccupancyPyramid,
    build_distance_grid,
    build_pyramid,
    downsample,
    march,
    march_fixed,
)
from ngprt.render import EARLY_STOP_T, composite, shade

MAGIC = b"NGRT"
FORMAT_VERSION = 1

SEC_CORNERS = 1
SEC_FINE = 2
SEC_PSI = 3
SEC_PYRAMID = 4
SEC_DISTANCE = 5
SEC_RENDER = 6
SEC_FUSION = 7

CORNER_CHUNK = 1 << 16


# corner decoding -------------------------------------------------------------


def evaluate_corner(model: NGPRTModel, corner) -> np.ndarray:
    """Pre-activation decoder output ``(8 + 2L,)`` at an integer ``L_C`` corner."""
    c = np.asarray(corner, dtype=np.int64)
    if c.shape != (3,):
        raise ShapeError("corner must be an integer 3-vector")
    if np.any(c < 0) or np.any(c > model.L_C):
        raise DomainError(f"corner {tuple(c)} is off the {model.L_C} lattice")
    return model.corner_rows(corner_linear(c[None], model.L_C))[0]


def coarse_decode(source, x) -> tuple[np.ndarray, np.ndarray]:
    """Coarse deferred feature ``(N, 8)`` and post-sigmoid attention ``(N, 2L)``.

    ``source`` is a live model or a baked scene; both go through the same
    corner interpolation, with the sigmoid applied after interpolation.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    cs = corner_stencil(x.reshape(-1, 3), source.L_C)
    raw = interpolate_corners(source.corner_rows(cs.unique), cs)
    f, a = split_decoded(raw, source.L)
    return (f[0], a[0]) if single else (f, a)


# baked scene ----------------------------------------------------------------------


@dataclass
class RenderSettings:
    base_step: float
    early_stop: float = EARLY_STOP_T
    max_step_rule: bool = False


@dataclass
class BakedScene:
    L_C: int
    corner_ids: np.ndarray  # (U,) sorted linear corner indices
    corner_data: np.ndarray  # (U, 8 + 2L) float32, attention pre-sigmoid
    enc: MultiLevelEncoding  # fine levels only
    psi: TinyMLP
    fuser: Fuser
    pyramid: OccupancyPyramid
    grid: DistanceGrid
    settings: RenderSettings
    coarse_table_lens: list[int] = field(default_factory=list)

    @property
    def L(self) -> int:
        return self.enc.L

    @property
    def fusion_mode(self) -> FusionMode:
        return self.fuser.mode

    def corner_rows(self, lin: np.ndarray) -> np.ndarray:
        """Rows for linear corner ids; corners absent from the map are zero."""
        lin = np.asarray(lin, dtype=np.int64)
        out = np.zeros((len(lin), self.corner_data.shape[1]), dtype=np.float32)
        if len(self.corner_ids) == 0:
            return out
        pos = np.searchsorted(self.corner_ids, lin)
        pos = np.minimum(pos, len(self.corner_ids) - 1)
        hit = self.corner_ids[pos] == lin
        out[hit] = self.corner_data[pos[hit]]
        return out

    @property
    def corner_fraction(self) -> float:
        return len(self.corner_ids) / (self.L_C + 1) ** 3


@dataclass
class LiveScene:
    """A live model plus render-time marching assets, rendered like a baked scene."""

    model: NGPRTModel
    pyramid: OccupancyPyramid
    grid: DistanceGrid
    settings: RenderSettings

    @property
    def L(self) -> int:
        return self.model.L

    @property
    def L_C(self) -> int:
        return self.model.L_C

    @property
    def enc(self):
        return self.model.enc

    @property
    def psi(self) -> TinyMLP:
        return self.model.psi

    @property
    def fuser(self) -> Fuser:
        return self.model.fuser

    def corner_rows(self, lin):
        return self.model.corner_rows(lin)


# baking -----------------------------------------------------------------------------


def _sub_voxel_points(idx: np.ndarray, R: int, per_axis: int = 2) -> np.ndarray:
    """Stratified points (centres of ``per_axis^3`` sub-cells) inside voxels."""
    o = (np.arange(per_axis) + 0.5) / per_axis
    sub = np.stack(np.meshgrid(o, o, o, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = (idx[:, None, :] + sub[None]) * (2.0 / R) - 1.0
    return pts.reshape(-1, 3)


def cull_occupancy(model: NGPRTModel, occ: np.ndarray, step: float, threshold: float, chunk: int = 1 << 18) -> np.ndarray:
    """Keep voxels whose peak sub-voxel density gives opacity above ``threshold`` per ``step``."""
    R = occ.shape[0]
    idx = np.argwhere(occ)
    keep = np.zeros(len(idx), dtype=bool)
    per = 8
    for s in range(0, len(idx), chunk // per):
        part = idx[s : s + chunk // per]
        sigma = model.density(_sub_voxel_points(part, R)).reshape(len(part), per).max(axis=1)
        keep[s : s + len(part)] = 1.0 - np.exp(-sigma * step) > threshold
    out = np.zeros_like(occ, dtype=bool)
    kept = idx[keep]
    out[kept[:, 0], kept[:, 1], kept[:, 2]] = True
    return out


def dilate(occ: np.ndarray, voxels: int = 1) -> np.ndarray:
    if voxels <= 0 or not occ.any():
        return occ.copy()
    return ndimage.binary_dilation(occ, structure=np.ones((3, 3, 3), dtype=bool), iterations=voxels)


def _resample_bits(occ: np.ndarray, res: int) -> np.ndarray:
    """OR-resample a bit grid to ``res`` (power-of-two ratio either way)."""
    while occ.shape[0] > res:
        occ = downsample(occ)
    if occ.shape[0] < res:
        f = res // occ.shape[0]
        occ = occ.repeat(f, 0).repeat(f, 1).repeat(f, 2)
    return occ


def retained_corners(occ: np.ndarray, L_C: int) -> np.ndarray:
    """Sorted linear ids of ``L_C`` corners adjacent to an occupied voxel."""
    occ_c = _resample_bits(occ, L_C)
    n = L_C + 1
    mark = np.zeros((n, n, n), dtype=bool)
    for k in range(8):
        ox, oy, oz = k & 1, (k >> 1) & 1, (k >> 2) & 1
        mark[ox : ox + L_C, oy : oy + L_C, oz : oz + L_C] |= occ_c
    xyz = np.argwhere(mark)
    return np.sort(corner_linear(xyz, L_C))


def build_render_assets(model: NGPRTModel, cull: bool = True) -> tuple[np.ndarray, OccupancyPyramid, DistanceGrid]:
    cfg = model.cfg
    occ = model.train_grid.copy()
    if cull:
        occ = cull_occupancy(model, occ, cfg.base_step, cfg.cull_alpha_threshold)
    occ = dilate(occ, 1)
    pyramid = build_pyramid(occ, cfg.pyramid_levels)
    grid = build_distance_grid(downsample(occ))
    return occ, pyramid, grid


def bake(model: NGPRTModel, cull: bool = True) -> BakedScene:
    """Freeze ``model`` into a self-contained :class:`BakedScene`."""
    if not model.is_finite():
        raise BakeError("model has non-finite parameters")
    cfg = model.cfg
    occ, pyramid, grid = build_render_assets(model, cull)
    ids = retained_corners(occ, model.L_C)
    data = np.zeros((len(ids), cfg.decoder_width), dtype=np.float32)
    for s in range(0, len(ids), CORNER_CHUNK):
        data[s : s + CORNER_CHUNK] = model.corner_rows(ids[s : s + CORNER_CHUNK])
    if not np.all(np.isfinite(data)):
        raise BakeError("decoded corner rows are not finite")
    enc = MultiLevelEncoding([], 1, cfg.fine_level_resolutions, cfg.fine_table_len, cfg.coarse_resolution, np.float32)
    for dst, src in zip(enc.fine_levels, model.enc.fine_levels):
        dst.entries = src.entries.astype(np.float32, copy=True)
    psi = _copy_mlp(model.psi)
    fz = model.fuser
    fuser = Fuser(
        fz.mode,
        fz.L,
        None if fz.inv_logits is None else fz.inv_logits.astype(np.float32, copy=True),
        None if fz.mlp is None else _copy_mlp(fz.mlp),
    )
    settings = RenderSettings(cfg.base_step, cfg.early_stop_transmittance, cfg.max_step_rule)
    return BakedScene(
        model.L_C, ids, data, enc, psi, fuser, pyramid, grid, settings,
        [lvl.table_len for lvl in model.enc.coarse_levels],
    )


def live_scene(model: NGPRTModel, baked: BakedScene | None = None, cull: bool = True) -> LiveScene:
    """Pair a live model with marching assets (shared with ``baked`` when given)."""
    cfg = model.cfg
    if baked is not None:
        return LiveScene(model, baked.pyramid, baked.grid, baked.settings)
    _, pyramid, grid = build_render_assets(model, cull)
    return LiveScene(model, pyramid, grid, RenderSettings(cfg.base_step, cfg.early_stop_transmittance, cfg.max_step_rule))


def _copy_mlp(mlp: TinyMLP) -> TinyMLP:
    return TinyMLP(
        list(mlp.layer_widths),
        [w.astype(np.float32, copy=True) for w in mlp.weights],
        [b.astype(np.float32, copy=True) for b in mlp.biases],
        name=mlp.name,
    )


# parameter accounting --------------------------------------------------------------

NOMINAL_SPARSITY = 0.02


def report_params(cfg: Config, sparsity: float | None = None) -> dict[str, float]:
    """Stored parameter counts: sparse coarse grid plus explicit fine tables.

    ``sparsity=None`` uses the nominal 2% corner occupancy; pass the measured
    fraction (e.g. ``BakedScene.corner_fraction``) for the measured count.
    The comparator is the equivalent count for a sparse 512^3 grid plus three
    2048^2 feature planes of width 8.
    """
    s = NOMINAL_SPARSITY if sparsity is None else float(sparsity)
    L = cfg.n_fine_levels
    coarse = cfg.decoder_width * s * cfg.coarse_resolution**3
    fine = 8 * L * cfg.fine_table_len
    comparator = 8 * (NOMINAL_SPARSITY * 512**3 + 3 * 2048**2)
    return dict(sparsity=s, coarse=coarse, fine=fine, total=coarse + fine, comparator=comparator)


# rendering ----------------------------------------------------------------------------------


@dataclass
class RenderResult:
    rgb: np.ndarray  # (R, 3)
    C_d: np.ndarray  # (R, 3) pre-sigmoid diffuse
    F: np.ndarray  # (R, 4)
    final_T: np.ndarray  # (R,)
    n_samples: np.ndarray  # (R,) samples composited
    marching: np.ndarray  # (R,) marching points up to termination
    occ_accesses: np.ndarray
    dist_accesses: np.ndarray


def _empty_result(n: int) -> RenderResult:
    z3 = np.zeros((n, 3))
    zi = np.zeros(n, dtype=np.int64)
    return RenderResult(z3, z3.copy(), np.zeros((n, 4)), np.ones(n), zi, zi.copy(), zi.copy(), zi.copy())


def render_rays(
    scene,
    origins,
    dirs,
    tnear,
    tfar,
    mode: str = "render",
    keep_level: int | None = None,
    use_distance_grid: bool = True,
    max_step_rule: bool | None = None,
    early_stop: float | None = -1.0,
    chunk: int = 1 << 14,
) -> RenderResult:
    """Render rays from a baked scene (``render``) or a live model.

    ``train`` mode needs a :class:`LiveScene` or model and marches the
    training grid at the base step without early termination; ``bake`` and
    ``render`` march the occupancy pyramid (and distance grid) and stop at the
    configured transmittance.  ``early_stop=None`` disables termination,
    the default ``-1`` means "use the scene setting".
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    tnear = np.atleast_1d(np.asarray(tnear, dtype=np.float64))
    tfar = np.atleast_1d(np.asarray(tfar, dtype=np.float64))
    if mode not in ("train", "bake", "render"):
        raise ValueError(f"unknown render mode {mode!r}")
    if mode == "train":
        model = scene.model if isinstance(scene, LiveScene) else scene
        source = model
        step = model.cfg.base_step
        stop = None
    else:
        if mode == "render" and not isinstance(scene, BakedScene):
            raise ValueError("render mode needs a baked scene")
        if mode == "bake" and not isinstance(scene, LiveScene):
            raise ValueError("bake mode needs a live scene")
        source = scene
        st = scene.settings
        step = st.base_step
        stop = st.early_stop if early_stop == -1.0 else early_stop
        rule = st.max_step_rule if max_step_rule is None else max_step_rule
    out = _empty_result(len(origins))
    for s in range(0, len(origins), chunk):
        sl = slice(s, min(s + chunk, len(origins)))
        o, d, tn, tf = origins[sl], dirs[sl], tnear[sl], tfar[sl]
        if mode == "train":
            t, offsets = march_fixed(o, d, tn, tf, model.train_grid, step)
            delta = np.full(len(t), step)
            mr = None
        else:
            mr = march(o, d, tn, tf, scene.pyramid, scene.grid if use_distance_grid else None, step, rule)
            t, delta, offsets = mr.sample_t, mr.sample_delta, mr.sample_offsets
        ray = np.repeat(np.arange(len(o)), np.diff(offsets))
        x = np.clip(o[ray] + t[:, None] * d[ray], -1.0, 1.0)
        f = fused_features(source, x, keep_level) if len(x) else np.zeros((0, 8))
        acc = composite(f[:, 0], f[:, 1:4], f[:, 4:8], delta, offsets, early_stop=stop)
        has = acc.n_used > 0
        rgb = np.zeros((len(o), 3))
        if np.any(has):
            rgb[has] = shade(acc.C_d[has], acc.F[has], d[has], source.psi)
        out.rgb[sl], out.C_d[sl], out.F[sl], out.final_T[sl] = rgb, acc.C_d, acc.F, acc.final_T
        out.n_samples[sl] = acc.n_used
        if mr is not None:
            c = mr.counters(acc.n_used)
            out.marching[sl] = c["marching_points"]
            out.occ_accesses[sl] = c["occ_grid_accesses"]
            out.dist_accesses[sl] = c["dist_grid_accesses"]
        else:
            out.marching[sl] = np.diff(offsets)
    return out


def render_image(scene, ds, frame: int, **kw) -> tuple[np.ndarray, RenderResult]:
    from ngprt.scene import frame_rays

    r = frame_rays(ds, frame)
    res = render_rays(scene, r["origins"], r["dirs"], r["tnear"], r["tfar"], **kw)
    return res.rgb.reshape(ds.height, ds.width, 3), res


# file format ----------------------------------------------------------------------------------


def _section(sid: int, payload: bytes) -> bytes:
    return struct.pack("<IQ", sid, len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))


def _mlp_bytes(mlp: TinyMLP) -> bytes:
    dims = np.array(mlp.layer_widths, dtype="<u4")
    parts = [struct.pack("<I", len(dims)), dims.tobytes()]
    parts += [np.ascontiguousarray(w, dtype="<f4").tobytes() for w in mlp.weights]
    parts += [np.ascontiguousarray(b, dtype="<f4").tobytes() for b in mlp.biases]
    return b"".join(parts)


def _bits_bytes(bits: np.ndarray) -> bytes:
    packed = np.packbits(bits.ravel(order="F").astype(np.uint8), bitorder="little")
    pad = (-len(packed)) % 8
    return packed.tobytes() + b"\0" * pad


def save_baked(scene: BakedScene, path) -> None:
    L = scene.L
    fine = scene.enc.fine_levels
    tabs = list(scene.coarse_table_lens) + [lvl.table_len for lvl in fine]
    head = MAGIC + struct.pack("<IIII", FORMAT_VERSION, scene.L_C, L, len(scene.coarse_table_lens))
    head += np.array([lvl.resolution for lvl in fine], dtype="<u4").tobytes()
    head += np.array(tabs, dtype="<u8").tobytes()
    head += struct.pack("<B", int(scene.fusion_mode))
    head += b"\0" * ((-len(head)) % 8)

    rec = np.zeros(len(scene.corner_ids), dtype=[("id", "<u8"), ("row", "<f4", (scene.corner_data.shape[1],))])
    rec["id"] = scene.corner_ids
    rec["row"] = scene.corner_data
    corners = struct.pack("<Q", len(rec)) + rec.tobytes()
    fine_b = b"".join(np.ascontiguousarray(lvl.entries, dtype="<f4").tobytes() for lvl in fine)
    pyr = struct.pack("<II", len(scene.pyramid.levels), scene.pyramid.resolutions[0])
    pyr += b"".join(_bits_bytes(lvl) for lvl in scene.pyramid.levels)
    dist = struct.pack("<I", scene.grid.resolution) + np.ascontiguousarray(scene.grid.values).ravel(order="F").tobytes()
    st = scene.settings
    render = struct.pack("<ddB", st.base_step, st.early_stop, int(st.max_step_rule))
    fz = scene.fuser
    fusion = struct.pack("<BB", fz.inv_logits is not None, fz.mlp is not None)
    if fz.inv_logits is not None:
        fusion += struct.pack("<I", len(fz.inv_logits)) + np.asarray(fz.inv_logits, dtype="<f4").tobytes()
    if fz.mlp is not None:
        fusion += _mlp_bytes(fz.mlp)
    body = b"".join(
        [
            _section(SEC_CORNERS, corners),
            _section(SEC_FINE, fine_b),
            _section(SEC_PSI, _mlp_bytes(scene.psi)),
            _section(SEC_PYRAMID, pyr),
            _section(SEC_DISTANCE, dist),
            _section(SEC_RENDER, render),
            _section(SEC_FUSION, fusion),
        ]
    )
    Path(path).write_bytes(head + body)


class _Reader:
    def __init__(self, buf: bytes, base: int = 0):
        self.buf = buf
        self.pos = 0
        self.base = base

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise LoadError(f"truncated while reading {what}", offset=self.base + self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, what), dtype=dt, count=count)


def _read_mlp(r: _Reader, name: str) -> TinyMLP:
    (n,) = r.unpack("<I", f"{name} layer count")
    dims = [int(v) for v in r.array("<u4", n, f"{name} dims")]
    ws = [r.array("<f4", a * b, f"{name} weights").reshape(a, b).copy() for a, b in zip(dims, dims[1:])]
    bs = [r.array("<f4", b, f"{name} biases").copy() for b in dims[1:]]
    return TinyMLP(dims, ws, bs, name=name)


def _read_bits(r: _Reader, res: int, what: str) -> np.ndarray:
    n = res**3
    nbytes = (n + 7) // 8
    nbytes += (-nbytes) % 8
    raw = r.array(np.uint8, nbytes, what)
    bits = np.unpackbits(raw, bitorder="little", count=n).astype(bool)
    return bits.reshape((res, res, res), order="F")


def load_baked(path) -> BakedScene:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}", offset=0) from exc
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise LoadError("not a baked scene file (bad magic)", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise LoadError(f"unsupported format version {version}", offset=4)
    L_C, L, n_coarse = r.unpack("<III", "header")
    fine_res = [int(v) for v in r.array("<u4", L, "fine resolutions")]
    tabs = [int(v) for v in r.array("<u8", n_coarse + L, "table lengths")]
    (tag,) = r.unpack("<B", "fusion tag")
    r.take((-r.pos) % 8, "header padding")
    try:
        mode = FusionMode(tag)
    except ValueError:
        raise LoadError(f"unknown fusion tag {tag}", offset=r.pos - 1) from None

    sections: dict[int, _Reader] = {}
    while r.pos < len(buf):
        start = r.pos
        sid, length = r.unpack("<IQ", "section header")
        payload = r.take(length, f"section {sid} payload")
        (crc,) = r.unpack("<I", f"section {sid} checksum")
        if zlib.crc32(payload) != crc:
            raise LoadError(f"checksum mismatch in section {sid}", offset=start)
        sections[sid] = _Reader(payload, start + 12)
    missing = {SEC_CORNERS, SEC_FINE, SEC_PSI, SEC_PYRAMID, SEC_DISTANCE, SEC_RENDER, SEC_FUSION} - set(sections)
    if missing:
        raise LoadError(f"missing sections {sorted(missing)}", offset=len(buf))

    s = sections[SEC_CORNERS]
    (count,) = s.unpack("<Q", "corner count")
    width = 8 + 2 * L
    rec = s.array([("id", "<u8"), ("row", "<f4", (width,))], count, "corner records")
    ids = rec["id"].astype(np.int64)
    data = np.ascontiguousarray(rec["row"], dtype=np.float32)

    enc = MultiLevelEncoding([], 1, fine_res, 1, L_C, np.float32)
    s = sections[SEC_FINE]
    for lvl, tl in zip(enc.fine_levels, tabs[n_coarse:]):
        lvl.table_len = tl
        lvl.entries = s.array("<f4", tl * 8, "fine table").reshape(tl, 8).copy()

    psi = _read_mlp(sections[SEC_PSI], "psi")

    s = sections[SEC_PYRAMID]
    n_levels, res0 = s.unpack("<II", "pyramid header")
    levels = [_read_bits(s, res0 >> k, "pyramid level") for k in range(n_levels)]

    s = sections[SEC_DISTANCE]
    (dres,) = s.unpack("<I", "distance resolution")
    values = s.array(np.uint8, dres**3, "distance values").reshape((dres,) * 3, order="F").copy()

    s = sections[SEC_RENDER]
    step, stop, rule = s.unpack("<ddB", "render settings")

    s = sections[SEC_FUSION]
    has_inv, has_mlp = s.unpack("<BB", "fusion flags")
    inv = None
    mlp = None
    if has_inv:
        (n,) = s.unpack("<I", "attention count")
        inv = s.array("<f4", n, "attention logits").copy()
    if has_mlp:
        mlp = _read_mlp(s, "fusion_mlp")
    return BakedScene(
        L_C, ids, data, enc, psi, Fuser(mode, L, inv, mlp), OccupancyPyramid(levels), DistanceGrid(values),
        RenderSettings(step, stop, bool(rule)), tabs[:n_coarse],
    )


def header_echo(path) -> dict:
    """Header fields of a baked file, for cross-checking against a config."""
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise LoadError("not a baked scene file (bad magic)", offset=0)
    (version,) = r.unpack("<I", "version")
    L_C, L, n_coarse = r.unpack("<III", "header")
    fine_res = [int(v) for v in r.array("<u4", L, "fine resolutions")]
    tabs = [int(v) for v in r.array("<u8", n_coarse + L, "table lengths")]
    (tag,) = r.unpack("<B", "fusion tag")
    return dict(version=version, L_C=L_C, L=L, fine_resolutions=fine_res, table_lens=tabs, fusion_mode=FusionMode(tag).name)
