"""Procedural Lambertian scenes with exact ground-truth intrinsics.

Scenes are ray cast with an orthographic camera tilted down onto a ground
plane (or facing a frontal backdrop). Spheres, axis-aligned boxes and
axis-aligned rectangular panels rest on the ground. A single directional
light plus an ambient term gives the irradiance; there are no shadows.

Camera-space conventions: x right, y up, z toward the viewer, so every
visible surface has n_z > 0. Depth is the distance along the viewing
direction divided by a fixed far distance, so it lies in (0, 1] and smaller
means closer.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .rng import stream

TENSOR_NAMES = ("rgb", "albedo", "depth", "normals", "irradiance")
MAGIC = b"IXDS"
VERSION = 1

_MIN_NZ = 1e-3


@dataclass
class IntrinsicStack:
    albedo: np.ndarray  # H x W x 3
    depth: np.ndarray  # H x W
    normals: np.ndarray  # H x W x 3
    irradiance: np.ndarray  # H x W

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def validate(self, atol: float = 1e-5) -> None:
        """Raise ValueError if any ground-truth invariant is violated."""
        h, w = self.depth.shape
        for name, arr, shp in (
            ("albedo", self.albedo, (h, w, 3)),
            ("normals", self.normals, (h, w, 3)),
            ("irradiance", self.irradiance, (h, w)),
        ):
            if arr.shape != shp:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shp}")
        norms = np.linalg.norm(self.normals.astype(np.float64), axis=-1)
        if np.any(np.abs(norms - 1.0) > atol):
            raise ValueError("normals are not unit length")
        if np.any(self.depth <= 0):
            raise ValueError("depth must be strictly positive")
        for name, arr in (("albedo", self.albedo), ("irradiance", self.irradiance)):
            if np.any(arr < 0) or np.any(arr > 1):
                raise ValueError(f"{name} outside [0, 1]")

    def __eq__(self, other):
        if not isinstance(other, IntrinsicStack):
            return NotImplemented
        return all(
            _same(getattr(self, k), getattr(other, k))
            for k in ("albedo", "depth", "normals", "irradiance")
        )


@dataclass(eq=False)
class SceneSample:
    rgb: np.ndarray
    gt: IntrinsicStack
    seed: int
    scene_descriptor: list = field(default_factory=list)

    def __eq__(self, other):
        # the descriptor is regenerable from the seed and is not serialized
        if not isinstance(other, SceneSample):
            return NotImplemented
        return self.seed == other.seed and _same(self.rgb, other.rgb) and self.gt == other.gt


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class SceneGenConfig:
    resolution: int = 32
    primitive_count: int | None = None  # None: uniform in [min_primitives, max_primitives]
    min_primitives: int = 3
    max_primitives: int = 6
    background: str = "ground"  # or "frontal"
    tilt_deg: float = 45.0
    view_size: float = 4.0
    camera_distance: float = 4.0
    ambient: float | None = None
    diffuse: float | None = None
    light_dir: tuple[float, float, float] | None = None  # world space
    background_albedo: tuple[float, float, float] | None = None
    # explicit primitive records bypass random placement (used by tests/fixtures)
    primitives: tuple | None = None

    def validate(self) -> None:
        if not 16 <= self.resolution <= 128:
            raise ConfigError(f"resolution must be in [16, 128], got {self.resolution}")
        if self.primitives is None:
            if self.primitive_count is not None and self.primitive_count < 1:
                raise ConfigError("primitive_count must be >= 1")
            if not 1 <= self.min_primitives <= self.max_primitives:
                raise ConfigError("need 1 <= min_primitives <= max_primitives")
        if self.background not in ("ground", "frontal"):
            raise ConfigError(f"unknown background {self.background!r}")
        if self.background == "ground" and not 5.0 <= self.tilt_deg <= 85.0:
            raise ConfigError("ground background needs tilt_deg in [5, 85]")
        if self.ambient is not None and self.diffuse is not None:
            if self.ambient < 0 or self.diffuse < 0 or self.ambient + self.diffuse > 1.0 + 1e-12:
                raise ConfigError("need ambient, diffuse >= 0 and ambient + diffuse <= 1")

    @property
    def tilt(self) -> float:
        return math.radians(self.tilt_deg) if self.background == "ground" else 0.0

    @property
    def far(self) -> float:
        """Distance mapped to depth 1.0."""
        if self.background == "frontal":
            return 1.25 * self.camera_distance
        return self.camera_distance + 0.5 * self.view_size / math.tan(self.tilt)

    @property
    def pixel_depth_scale(self) -> float:
        """World size of one pixel expressed in normalized depth units."""
        return self.view_size / self.resolution / self.far


class _Camera:
    def __init__(self, cfg: SceneGenConfig):
        phi = cfg.tilt
        self.forward = np.array([0.0, -math.sin(phi), -math.cos(phi)])
        self.right = np.array([1.0, 0.0, 0.0])
        self.up = np.array([0.0, math.cos(phi), -math.sin(phi)])
        center = -cfg.camera_distance * self.forward
        n = cfg.resolution
        s = (np.arange(n) + 0.5) / n * cfg.view_size - cfg.view_size / 2
        xs = s[None, :]
        ys = -s[:, None]
        self.origins = (
            center[None, None, :]
            + xs[..., None] * self.right[None, None, :]
            + ys[..., None] * self.up[None, None, :]
        )

    def to_camera(self, n_world: np.ndarray) -> np.ndarray:
        return np.stack(
            [n_world @ self.right, n_world @ self.up, -(n_world @ self.forward)], axis=-1
        )


def _hit_plane(origins, d, point, normal):
    denom = float(np.dot(d, normal))
    if abs(denom) < 1e-12:
        return np.full(origins.shape[:2], np.inf), None
    t = ((np.asarray(point) - origins) @ normal) / denom
    t = np.where(t > 1e-9, t, np.inf)
    return t, np.broadcast_to(np.asarray(normal, float), origins.shape)


def _hit_sphere(origins, d, center, radius):
    oc = origins - np.asarray(center)
    b = oc @ d
    c = np.einsum("ijk,ijk->ij", oc, oc) - radius * radius
    disc = b * b - c
    hit = disc > 0
    t = np.where(hit, -b - np.sqrt(np.where(hit, disc, 0.0)), np.inf)
    t = np.where(t > 1e-9, t, np.inf)
    finite = np.isfinite(t)
    p = origins + np.where(finite, t, 0.0)[..., None] * d
    normals = np.where(finite[..., None], (p - np.asarray(center)) / radius, 0.0)
    return t, normals


def _hit_box(origins, d, lo, hi):
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    h, w = origins.shape[:2]
    t_near = np.full((h, w), -np.inf)
    t_far = np.full((h, w), np.inf)
    axis_near = np.zeros((h, w), dtype=int)
    sign_near = np.zeros((h, w))
    for ax in range(3):
        if abs(d[ax]) < 1e-12:
            inside = (origins[..., ax] >= lo[ax]) & (origins[..., ax] <= hi[ax])
            t_far = np.where(inside, t_far, -np.inf)
            continue
        t1 = (lo[ax] - origins[..., ax]) / d[ax]
        t2 = (hi[ax] - origins[..., ax]) / d[ax]
        tn = np.minimum(t1, t2)
        tf = np.maximum(t1, t2)
        better = tn > t_near
        t_near = np.where(better, tn, t_near)
        axis_near = np.where(better, ax, axis_near)
        sign_near = np.where(better, -np.sign(d[ax]), sign_near)
        t_far = np.minimum(t_far, tf)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    t = np.where(hit, t_near, np.inf)
    normals = np.zeros((h, w, 3))
    for ax in range(3):
        normals[..., ax] = np.where(axis_near == ax, sign_near, 0.0)
    return t, normals


def _hit_panel(origins, d, lo, hi, axis):
    """Finite rectangle perpendicular to `axis`, spanning [lo, hi] on the other two axes."""
    normal = np.zeros(3)
    normal[axis] = 1.0
    plane_val = lo[axis]
    if abs(d[axis]) < 1e-12:
        return np.full(origins.shape[:2], np.inf), None
    t = (plane_val - origins[..., axis]) / d[axis]
    p = origins + t[..., None] * d
    inside = np.ones(t.shape, dtype=bool)
    for ax in range(3):
        if ax != axis:
            inside &= (p[..., ax] >= lo[ax]) & (p[..., ax] <= hi[ax])
    t = np.where(inside & (t > 1e-9), t, np.inf)
    if np.dot(normal, d) > 0:
        normal = -normal
    return t, np.broadcast_to(normal, origins.shape)


def _random_primitives(rng: np.random.Generator, cfg: SceneGenConfig) -> list[dict]:
    if cfg.primitive_count is not None:
        count = cfg.primitive_count
    else:
        count = int(rng.integers(cfg.min_primitives, cfg.max_primitives + 1))
    half = 0.4 * cfg.view_size
    prims = []
    for _ in range(count):
        kind = ("sphere", "box", "plane")[int(rng.integers(0, 3))]
        x = float(rng.uniform(-half, half))
        z = float(rng.uniform(-0.3 * cfg.view_size, 0.3 * cfg.view_size))
        base = 0.0 if cfg.background == "ground" else z
        color = [float(v) for v in rng.uniform(0.08, 0.92, size=3)]
        if kind == "sphere":
            r = float(rng.uniform(0.25, 0.7))
            if cfg.background == "ground":
                center = [x, r, z]
            else:
                center = [x, float(rng.uniform(-half, half)), r + 0.2]
            prims.append({"kind": "sphere", "pose": {"center": center, "radius": r}, "albedo": color})
        elif kind == "box":
            sx, sy, sz = (float(v) for v in rng.uniform(0.3, 1.1, size=3))
            if cfg.background == "ground":
                lo = [x - sx / 2, 0.0, z - sz / 2]
            else:
                y = float(rng.uniform(-half, half))
                lo = [x - sx / 2, y - sy / 2, 0.1]
            hi = [lo[0] + sx, lo[1] + sy, lo[2] + sz]
            prims.append({"kind": "box", "pose": {"lo": lo, "hi": hi}, "albedo": color})
        else:
            wx, wy = (float(v) for v in rng.uniform(0.4, 1.3, size=2))
            if cfg.background == "ground" and rng.uniform() < 0.5:
                # horizontal tile floating above the ground
                hgt = float(rng.uniform(0.1, 0.8))
                lo = [x - wx / 2, hgt, z - wy / 2]
                hi = [x + wx / 2, hgt, z + wy / 2]
                axis = 1
            else:
                y0 = base if cfg.background == "ground" else float(rng.uniform(-half, half))
                zc = z if cfg.background == "ground" else float(rng.uniform(0.1, 1.0))
                lo = [x - wx / 2, y0, zc]
                hi = [x + wx / 2, y0 + wy, zc]
                axis = 2
            prims.append({"kind": "plane", "pose": {"lo": lo, "hi": hi, "axis": axis}, "albedo": color})
    return prims


def _trace(cfg: SceneGenConfig, cam: _Camera, prims: list[dict], bg_albedo):
    d = cam.forward
    origins = cam.origins
    if cfg.background == "ground":
        bg_normal = np.array([0.0, 1.0, 0.0])
    else:
        bg_normal = -d
    t_best, n_bg = _hit_plane(origins, d, np.zeros(3), bg_normal)
    if not np.all(np.isfinite(t_best)):
        raise ConfigError("camera does not see the background everywhere")
    normals = np.array(n_bg, dtype=float)
    albedo = np.broadcast_to(np.asarray(bg_albedo, float), origins.shape).copy()

    for prim in prims:
        pose = prim["pose"]
        if prim["kind"] == "sphere":
            t, n = _hit_sphere(origins, d, pose["center"], pose["radius"])
        elif prim["kind"] == "box":
            t, n = _hit_box(origins, d, pose["lo"], pose["hi"])
        elif prim["kind"] == "plane":
            t, n = _hit_panel(origins, d, pose["lo"], pose["hi"], pose["axis"])
        else:
            raise ConfigError(f"unknown primitive kind {prim['kind']!r}")
        if n is None:
            continue
        # grazing hits would violate n_z > 0; let them fall through
        nz = -(n @ d)
        closer = (t < t_best) & (nz > _MIN_NZ)
        t_best = np.where(closer, t, t_best)
        normals = np.where(closer[..., None], n, normals)
        albedo = np.where(closer[..., None], np.asarray(prim["albedo"], float), albedo)
    return t_best, normals, albedo


def _lighting(rng: np.random.Generator, cfg: SceneGenConfig):
    ambient = cfg.ambient if cfg.ambient is not None else float(rng.uniform(0.15, 0.35))
    if cfg.diffuse is not None:
        diffuse = cfg.diffuse
    else:
        diffuse = float(rng.uniform(0.55, 1.0 - ambient))
    if cfg.light_dir is not None:
        light = np.asarray(cfg.light_dir, float)
    else:
        elev = rng.uniform(math.radians(25), math.radians(75))
        azim = rng.uniform(-math.pi * 0.75, math.pi * 0.75)
        light = np.array([math.cos(elev) * math.sin(azim), math.sin(elev), math.cos(elev) * math.cos(azim)])
    norm = np.linalg.norm(light)
    light = light / norm if norm > 0 else light
    return ambient, diffuse, light


def generate_scene(seed: int, cfg: SceneGenConfig = SceneGenConfig()) -> SceneSample:
    cfg.validate()
    rng = stream(seed, "scene")
    if cfg.background_albedo is not None:
        bg_albedo = list(cfg.background_albedo)
    else:
        bg_albedo = [float(v) for v in rng.uniform(0.2, 0.85, size=3)]
    if cfg.primitives is not None:
        prims = [dict(p) for p in cfg.primitives]
    else:
        prims = _random_primitives(rng, cfg)
    ambient, diffuse, light = _lighting(rng, cfg)

    cam = _Camera(cfg)
    t, n_world, albedo = _trace(cfg, cam, prims, bg_albedo)
    irradiance = np.clip(ambient + diffuse * np.maximum(0.0, n_world @ light), 0.0, 1.0)
    normals = cam.to_camera(n_world)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)

    gt = IntrinsicStack(
        albedo=albedo.astype(np.float32),
        depth=(t / cfg.far).astype(np.float32),
        normals=normals.astype(np.float32),
        irradiance=irradiance.astype(np.float32),
    )
    descriptor = [{"kind": "background", "pose": {"type": cfg.background}, "albedo": bg_albedo}] + prims
    return SceneSample(rgb=render_lambertian(gt), gt=gt, seed=int(seed), scene_descriptor=descriptor)


def generate_dataset(seeds: Sequence[int], cfg: SceneGenConfig = SceneGenConfig(), workers: int = 1):
    if workers <= 1:
        return [generate_scene(s, cfg) for s in seeds]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(generate_scene, seeds, [cfg] * len(seeds)))


def render_lambertian(gt: IntrinsicStack) -> np.ndarray:
    albedo = np.asarray(gt.albedo)
    irr = np.asarray(gt.irradiance)
    if albedo.ndim != 3 or albedo.shape[-1] != 3 or albedo.shape[:2] != irr.shape:
        raise ValueError(f"albedo {albedo.shape} and irradiance {irr.shape} do not match")
    return np.clip(albedo * irr[..., None], 0.0, 1.0)


def with_config(cfg: SceneGenConfig, **changes) -> SceneGenConfig:
    return replace(cfg, **changes)


# ---------------------------------------------------------------------------
# binary container


def _sample_tensors(sample: SceneSample):
    return (
        ("rgb", sample.rgb),
        ("albedo", sample.gt.albedo),
        ("depth", sample.gt.depth),
        ("normals", sample.gt.normals),
        ("irradiance", sample.gt.irradiance),
    )


def dumps_dataset(samples: Sequence[SceneSample]) -> bytes:
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for s in samples:
        tensors = _sample_tensors(s)
        buf.write(struct.pack("<QI", int(s.seed) & 0xFFFFFFFFFFFFFFFF, len(tensors)))
        for name, arr in tensors:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
    return buf.getvalue()


def write_dataset(samples: Sequence[SceneSample], path) -> None:
    data = dumps_dataset(samples)
    Path(path).write_bytes(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads_dataset(data: bytes) -> list[SceneSample]:
    rd = _Reader(data)
    magic = rd.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    (version,) = rd.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    samples = []
    while rd.pos < len(data):
        start = rd.pos
        seed, count = rd.unpack("<QI", "sample header")
        tensors = {}
        for _ in range(count):
            (name_len,) = rd.unpack("<H", "tensor name length")
            name_at = rd.pos
            try:
                name = rd.take(name_len, "tensor name").decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError("tensor name is not UTF-8", name_at) from None
            if name not in TENSOR_NAMES:
                raise FormatError(f"unexpected tensor name {name!r}", name_at)
            (rank,) = rd.unpack("<B", "tensor rank")
            dims = rd.unpack(f"<{rank}I", "tensor dims")
            size = int(np.prod(dims, dtype=np.int64)) * 4
            payload = rd.take(size, f"tensor {name!r} payload")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        missing = set(TENSOR_NAMES) - set(tensors)
        if missing:
            raise FormatError(f"sample missing tensors {sorted(missing)}", start)
        gt = IntrinsicStack(
            albedo=tensors["albedo"],
            depth=tensors["depth"],
            normals=tensors["normals"],
            irradiance=tensors["irradiance"],
        )
        samples.append(SceneSample(rgb=tensors["rgb"], gt=gt, seed=seed))
    return samples


def read_dataset(path) -> list[SceneSample]:
    return loads_dataset(Path(path).read_bytes())
