"""Procedural shape categories, posed partial observations, dataset files.

Each category is a parametric template sampled area-uniformly into a
canonical cloud: centroid at the origin, symmetry axis (when there is one)
along +y, metric size.  Observations are the camera-facing part of a posed
canonical cloud plus Gaussian noise, colored per template region.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geom3d import Pose, PointCloud, aabb_size, apply_pose, random_quaternion

FORMAT_VERSION = 1
_MAGIC = b"CASSDATA"
Y_AXIS = (0.0, 1.0, 0.0)


@dataclass(frozen=True)
class CategorySpec:
    name: str
    template: str
    size_ranges: dict
    symmetry_axis: Optional[tuple] = None

    def __post_init__(self):
        if self.template not in _TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}")
        for key, (lo, hi) in self.size_ranges.items():
            if not 0 < lo <= hi:
                raise ValueError(f"{self.name}: bad range for {key}: {(lo, hi)}")
        if (self.template in SYMMETRIC_TEMPLATES) != (self.symmetry_axis is not None):
            raise ValueError(f"{self.name}: symmetry axis must be set exactly for symmetric templates")

    def to_dict(self):
        return {"name": self.name, "template": self.template,
                "size_ranges": {k: list(v) for k, v in self.size_ranges.items()},
                "symmetry_axis": None if self.symmetry_axis is None else list(self.symmetry_axis)}

    @classmethod
    def from_dict(cls, d):
        axis = d.get("symmetry_axis")
        return cls(d["name"], d["template"], {k: tuple(v) for k, v in d["size_ranges"].items()},
                   None if axis is None else tuple(axis))


@dataclass
class Instance:
    instance_id: int
    category: CategorySpec
    shape_params: np.ndarray
    canonical: PointCloud
    size: np.ndarray
    seed: int = 0


@dataclass
class ObservationRecord:
    record_id: int
    instance_id: int
    observed: PointCloud
    gt_pose: Pose
    gt_size: np.ndarray = field(default_factory=lambda: np.zeros(3))


# --- surface pieces -------------------------------------------------------
# Each piece is (area, sampler, color); samplers map (rng, n) -> (n, 3).

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _lattice(rng, n):
    """Two area coordinates in [0, 1) from a randomly shifted Fibonacci lattice.

    Each point is marginally uniform, but the set covers the square far more
    evenly than i.i.d. draws, so rotated copies of a symmetric surface stay
    close to the original under Chamfer distance.
    """
    i = np.arange(n)
    a, b = rng.random(2)
    u = (i + a) / n
    v = (i * _GOLDEN + b) % 1.0
    return u, v


def _disk(radius, y, inner=0.0):
    def sample(rng, n):
        u, v = _lattice(rng, n)
        r = np.sqrt(inner ** 2 + u * (radius ** 2 - inner ** 2))
        phi = 2 * np.pi * v
        return np.stack([r * np.cos(phi), np.full(n, y), r * np.sin(phi)], axis=1)
    return np.pi * (radius ** 2 - inner ** 2), sample


def _frustum(r0, r1, y0, y1):
    """Lateral surface of a cone frustum between heights y0 < y1."""
    slant = np.hypot(r1 - r0, y1 - y0)

    def sample(rng, n):
        # radius varies linearly; area density grows with radius
        u, v = _lattice(rng, n)
        if abs(r1 - r0) < 1e-12:
            s = u
        else:
            s = (np.sqrt(r0 ** 2 + u * (r1 ** 2 - r0 ** 2)) - r0) / (r1 - r0)
        r = r0 + s * (r1 - r0)
        phi = 2 * np.pi * v
        return np.stack([r * np.cos(phi), y0 + s * (y1 - y0), r * np.sin(phi)], axis=1)
    return np.pi * (r0 + r1) * slant, sample


def _sphere_zone(radius, y0, y1):
    # Archimedes: area-uniform in height on a sphere
    def sample(rng, n):
        u, v = _lattice(rng, n)
        y = y0 + u * (y1 - y0)
        r = np.sqrt(np.clip(radius ** 2 - y ** 2, 0, None))
        phi = 2 * np.pi * v
        return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)
    return 2 * np.pi * radius * (y1 - y0), sample


def _half_torus(cx, major, minor):
    """Outer half of a torus in the x-y plane around (cx, 0, 0)."""
    def sample(rng, n):
        out = np.empty((0, 3))
        while len(out) < n:
            u = rng.uniform(-np.pi / 2, np.pi / 2, 2 * n)
            v = rng.uniform(0, 2 * np.pi, 2 * n)
            keep = rng.random(2 * n) * (major + minor) <= major + minor * np.cos(v)
            u, v = u[keep], v[keep]
            rr = major + minor * np.cos(v)
            pts = np.stack([cx + rr * np.cos(u), rr * np.sin(u), minor * np.sin(v)], axis=1)
            out = np.vstack([out, pts])
        return out[:n]
    return np.pi * major * 2 * np.pi * minor, sample


def _rect(origin, du, dv):
    origin, du, dv = (np.asarray(x, dtype=np.float64) for x in (origin, du, dv))

    def sample(rng, n):
        a, b = _lattice(rng, n)
        return origin + a[:, None] * du + b[:, None] * dv
    return float(np.linalg.norm(np.cross(du, dv))), sample


def _box(corner, e1, e2, e3):
    """Six faces of the parallelepiped spanned by edges e1, e2, e3 at ``corner``."""
    c, e1, e2, e3 = (np.asarray(x, dtype=np.float64) for x in (corner, e1, e2, e3))
    return {
        "+x": _rect(c + e1, e2, e3), "-x": _rect(c, e2, e3),
        "+y": _rect(c + e2, e1, e3), "-y": _rect(c, e1, e3),
        "+z": _rect(c + e3, e1, e2), "-z": _rect(c, e1, e2),
    }


def _box_faces(w, h, d):
    return _box([-w / 2, -h / 2, -d / 2], [w, 0, 0], [0, h, 0], [0, 0, d])


def _can(p, palette):
    r, h = p["radius"], p["height"]
    return [
        (*_frustum(r, r, -h / 2, h / 2), palette["body"]),
        (*_disk(r, h / 2), palette["top"]),
        (*_disk(r, -h / 2), palette["bottom"]),
    ]


def _bottle(p, palette):
    r, hb = p["radius"], p["body_height"]
    rn = p["neck_ratio"] * r
    hs, hn = p["shoulder_height"], p["neck_height"]
    y1, y2 = hb, hb + hs
    return [
        (*_disk(r, 0.0), palette["bottom"]),
        (*_frustum(r, r, 0.0, y1), palette["body"]),
        (*_frustum(r, rn, y1, y2), palette["shoulder"]),
        (*_frustum(rn, rn, y2, y2 + hn), palette["neck"]),
        (*_disk(rn, y2 + hn), palette["top"]),
    ]


def _bowl(p, palette):
    r = p["radius"]
    top = -r + p["depth_ratio"] * r
    mid = -r + 0.5 * (top + r)
    return [
        (*_sphere_zone(r, -r, mid), palette["bottom"]),
        (*_sphere_zone(r, mid, top), palette["body"]),
    ]


def _mug(p, palette):
    r, h = p["radius"], p["height"]
    return [
        (*_frustum(r, r, -h / 2, h / 2), palette["body"]),
        (*_disk(r, -h / 2), palette["bottom"]),
        (*_half_torus(r, p["handle_radius"], p["handle_thickness"]), palette["handle"]),
    ]


def _laptop(p, palette):
    """A thick base box and a thin lid box hinged at the base's back edge."""
    w, d = p["width"], p["depth"]
    tb, tl = p["base_thickness"], p["lid_thickness"]
    a = np.radians(p["hinge_deg"])
    up = np.array([0.0, np.sin(a), np.cos(a)])
    back = np.array([0.0, np.cos(a), -np.sin(a)])
    base = _box([-w / 2, 0, -d / 2], [w, 0, 0], [0, tb, 0], [0, 0, d])
    lid = _box([-w / 2, tb, -d / 2], [w, 0, 0], up * p["screen_ratio"] * d, back * tl)
    pieces = [(*f, palette["keys"] if k == "+y" else palette["base"]) for k, f in base.items()]
    pieces += [(*f, palette["screen"]) for f in lid.values()]
    return pieces


def _camera(p, palette):
    faces = _box_faces(p["width"], p["height"], p["depth"])
    return [(*faces[k], palette["front"] if k == "+z" else
             palette["top"] if k == "+y" else palette["body"]) for k in faces]


_TEMPLATES = {
    "can": (_can, ("body", "top", "bottom")),
    "bottle": (_bottle, ("body", "shoulder", "neck", "top", "bottom")),
    "bowl": (_bowl, ("body", "bottom")),
    "mug": (_mug, ("body", "bottom", "handle")),
    "laptop": (_laptop, ("base", "keys", "screen")),
    "camera-proxy": (_camera, ("body", "front", "top")),
}
SYMMETRIC_TEMPLATES = {"can", "bottle", "bowl"}

# base region colors; instances jitter these
_BASE_COLORS = {
    "body": (0.80, 0.25, 0.20), "top": (0.85, 0.85, 0.85), "bottom": (0.20, 0.20, 0.25),
    "shoulder": (0.30, 0.65, 0.35), "neck": (0.25, 0.45, 0.80), "handle": (0.95, 0.80, 0.20),
    "base": (0.25, 0.25, 0.30), "keys": (0.55, 0.55, 0.60), "screen": (0.70, 0.85, 0.95), "front": (0.10, 0.10, 0.10),
}

CATEGORIES = {
    "can": CategorySpec("can", "can", {"radius": (0.025, 0.045), "height": (0.08, 0.14)}, Y_AXIS),
    "bottle": CategorySpec("bottle", "bottle", {
        "radius": (0.028, 0.045), "body_height": (0.09, 0.15), "neck_ratio": (0.3, 0.45),
        "shoulder_height": (0.02, 0.04), "neck_height": (0.03, 0.06)}, Y_AXIS),
    "bowl": CategorySpec("bowl", "bowl", {"radius": (0.05, 0.09), "depth_ratio": (0.45, 0.8)}, Y_AXIS),
    "mug": CategorySpec("mug", "mug", {
        "radius": (0.035, 0.05), "height": (0.08, 0.12),
        "handle_radius": (0.025, 0.035), "handle_thickness": (0.005, 0.008)}),
    "laptop": CategorySpec("laptop", "laptop", {
        "width": (0.25, 0.35), "depth": (0.18, 0.25), "screen_ratio": (0.9, 1.05),
        "hinge_deg": (95.0, 130.0), "base_thickness": (0.015, 0.025),
        "lid_thickness": (0.005, 0.009)}),
    "camera": CategorySpec("camera", "camera-proxy", {
        "width": (0.08, 0.12), "height": (0.06, 0.09), "depth": (0.04, 0.07)}),
}
DEFAULT_CATEGORIES = ("bottle", "bowl", "laptop")


def get_category(name):
    try:
        return CATEGORIES[name]
    except KeyError:
        raise ValueError(f"unknown category {name!r}; known: {sorted(CATEGORIES)}") from None


def _draw_params(category, rng):
    return {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in category.size_ranges.items()}


def build_instance(category, params, n_points, rng, instance_id=0, seed=0):
    builder, regions = _TEMPLATES[category.template]
    palette = {k: np.clip(np.array(_BASE_COLORS[k]) + rng.uniform(-0.08, 0.08, 3), 0, 1)
               for k in regions}
    pieces = builder(params, palette)
    areas = np.array([a for a, _, _ in pieces])
    counts = rng.multinomial(n_points, areas / areas.sum())
    pts, cols = [], []
    for (_, sampler, color), n in zip(pieces, counts):
        if n:
            pts.append(sampler(rng, n))
            cols.append(np.tile(color, (n, 1)))
    pts = np.vstack(pts)
    pts -= pts.mean(axis=0)
    cloud = PointCloud(pts, np.vstack(cols))
    return Instance(instance_id, category, np.array(list(params.values())), cloud,
                    aabb_size(cloud), seed)


def sample_instance(category, seed, n_points=128, instance_id=0):
    """Deterministic instance of ``category``: parameters and surface samples."""
    if isinstance(category, str):
        category = get_category(category)
    rng = np.random.default_rng(seed)
    params = _draw_params(category, rng)
    return build_instance(category, params, n_points, rng, instance_id, seed)


def sample_pose(rng, xy_range=0.15, z_range=(0.5, 1.0)):
    """Uniform rotation and a translation in a box in front of the camera."""
    t = np.array([rng.uniform(-xy_range, xy_range), rng.uniform(-xy_range, xy_range),
                  rng.uniform(*z_range)])
    return Pose(random_quaternion(rng), t)


def render_observation(instance, pose, visibility_fraction=0.75, noise_sigma=0.0, seed=0,
                       n_points=None, record_id=0):
    """Camera-facing part of the posed canonical cloud, with noise.

    The camera sits at the origin; points are ranked by how far they lie
    toward the camera along the object-to-camera axis and the top
    ``visibility_fraction`` share is kept.
    """
    if not 0.3 <= visibility_fraction <= 1.0:
        raise ValueError("visibility_fraction must lie in [0.3, 1]")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    cloud = instance.canonical
    rotated = cloud.points @ pose.R.T
    dist = np.linalg.norm(pose.t)
    view = -pose.t / dist if dist > 0 else np.array([0.0, 0.0, -1.0])
    k = int(round(visibility_fraction * len(rotated)))
    if k < 8:
        raise ValueError(f"only {k} visible points; need at least 8")
    order = np.argsort(-(rotated @ view), kind="stable")
    keep = np.sort(order[:k])
    if n_points is not None and len(keep) > n_points:
        keep = np.sort(rng.choice(keep, size=n_points, replace=False))
    pts = rotated[keep] + pose.t
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    colors = None if cloud.colors is None else cloud.colors[keep]
    return ObservationRecord(record_id, instance.instance_id, PointCloud(pts, colors), pose,
                             instance.size.copy())


# --- datasets -------------------------------------------------------------

@dataclass
class Dataset:
    categories: list
    instances: list
    records: list
    n_points: int
    obs_points: int
    meta: dict = field(default_factory=dict)

    def instance(self, instance_id):
        return self._index()[instance_id]

    def _index(self):
        idx = getattr(self, "_by_id", None)
        if idx is None or len(idx) != len(self.instances):
            idx = {inst.instance_id: inst for inst in self.instances}
            self._by_id = idx
        return idx

    def category_of(self, record):
        return self.instance(record.instance_id).category

    def split(self, test_fraction=0.2):
        """Train/test record lists, held out by instance within each category."""
        by_cat = {}
        for inst in self.instances:
            by_cat.setdefault(inst.category.name, []).append(inst.instance_id)
        test_ids = set()
        for ids in by_cat.values():
            n_test = max(1, int(round(test_fraction * len(ids))))
            test_ids.update(sorted(ids)[-n_test:])
        train = [r for r in self.records if r.instance_id not in test_ids]
        test = [r for r in self.records if r.instance_id in test_ids]
        return train, test

    def train_instances(self, test_fraction=0.2):
        train, _ = self.split(test_fraction)
        ids = {r.instance_id for r in train}
        return [inst for inst in self.instances if inst.instance_id in ids]


def generate_dataset(categories=DEFAULT_CATEGORIES, instances_per_category=200,
                     views_per_instance=4, n_points=128, obs_points=96,
                     visibility=0.75, noise=0.002, seed=0):
    """Every instance and view is seeded from ``(seed, category, instance, view)``."""
    cats = [get_category(c) if isinstance(c, str) else c for c in categories]
    instances, records = [], []
    for ci, cat in enumerate(cats):
        for ii in range(instances_per_category):
            iid = ci * instances_per_category + ii
            inst = sample_instance(cat, [seed, ci, ii], n_points, instance_id=iid)
            instances.append(inst)
            for vi in range(views_per_instance):
                rng = np.random.default_rng([seed, ci, ii, vi, 1])
                pose = sample_pose(rng)
                rec = render_observation(inst, pose, visibility, noise,
                                         seed=[seed, ci, ii, vi, 2], n_points=obs_points,
                                         record_id=len(records))
                records.append(rec)
    # clouds are stored as float32; round now so the dataset equals its file
    for obj in instances:
        obj.canonical = _as_stored(obj.canonical)
    for rec in records:
        rec.observed = _as_stored(rec.observed)
    meta = {"seed": seed, "instances_per_category": instances_per_category,
            "views_per_instance": views_per_instance, "visibility": visibility, "noise": noise}
    return Dataset(cats, instances, records, n_points, obs_points, meta)


def _as_stored(cloud):
    cols = None if cloud.colors is None else cloud.colors.astype("<f4")
    return PointCloud(cloud.points.astype("<f4"), cols)


class DatasetFormatError(IOError):
    pass


def _pack_cloud(buf, cloud):
    buf.append(struct.pack("<I", len(cloud)))
    buf.append(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())
    colors = cloud.colors if cloud.colors is not None else np.zeros_like(cloud.points)
    buf.append(np.ascontiguousarray(colors, dtype="<f4").tobytes())


def write_dataset(dataset, path):
    """Binary container: header JSON, instance table, records, crc32 trailer.

    Poses and sizes are stored as float64; point and color arrays as
    little-endian float32.
    """
    cat_index = {c.name: i for i, c in enumerate(dataset.categories)}
    header = {
        "format_version": FORMAT_VERSION,
        "categories": [c.to_dict() for c in dataset.categories],
        "n_points": dataset.n_points, "obs_points": dataset.obs_points,
        "n_instances": len(dataset.instances), "n_records": len(dataset.records),
        "meta": dataset.meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = [_MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes]
    for inst in dataset.instances:
        if len(inst.canonical) > dataset.n_points:
            raise ValueError("instance exceeds the header point cap")
        seed = json.dumps(inst.seed if np.isscalar(inst.seed) else list(inst.seed)).encode()
        buf.append(struct.pack("<iiII", inst.instance_id, cat_index[inst.category.name],
                               len(inst.shape_params), len(seed)))
        buf.append(seed)
        buf.append(np.asarray(inst.shape_params, dtype="<f8").tobytes())
        buf.append(np.asarray(inst.size, dtype="<f8").tobytes())
        _pack_cloud(buf, inst.canonical)
    for rec in dataset.records:
        if len(rec.observed) > dataset.obs_points:
            raise ValueError("observation exceeds the header point cap")
        buf.append(struct.pack("<ii", rec.record_id, rec.instance_id))
        buf.append(np.asarray(rec.gt_pose.as_vector(), dtype="<f8").tobytes())
        buf.append(np.asarray(rec.gt_size, dtype="<f8").tobytes())
        _pack_cloud(buf, rec.observed)
    body = b"".join(buf)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, raw, offset):
        self.raw, self.off = raw, offset

    def take(self, fmt):
        vals = struct.unpack_from(fmt, self.raw, self.off)
        self.off += struct.calcsize(fmt)
        return vals

    def array(self, dtype, n):
        size = np.dtype(dtype).itemsize * n
        if self.off + size > len(self.raw):
            raise DatasetFormatError("truncated dataset")
        arr = np.frombuffer(self.raw, dtype=dtype, count=n, offset=self.off)
        self.off += size
        return arr.astype(np.float64)

    def cloud(self):
        (n,) = self.take("<I")
        pts = self.array("<f4", 3 * n).reshape(n, 3)
        cols = self.array("<f4", 3 * n).reshape(n, 3)
        return PointCloud(pts, cols)


def read_dataset(path):
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != _MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {version}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise DatasetFormatError(f"{path}: checksum mismatch (truncated or corrupted)")
    try:
        header = json.loads(body[16:16 + hlen])
    except ValueError as err:
        raise DatasetFormatError(f"{path}: unparseable header") from err
    if header.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: header version mismatch")
    cats = [CategorySpec.from_dict(c) for c in header["categories"]]
    rd = _Reader(body, 16 + hlen)
    instances = []
    try:
        for _ in range(header["n_instances"]):
            iid, ci, n_params, seed_len = rd.take("<iiII")
            seed = json.loads(body[rd.off:rd.off + seed_len])
            rd.off += seed_len
            params = rd.array("<f8", n_params)
            size = rd.array("<f8", 3)
            instances.append(Instance(iid, cats[ci], params, rd.cloud(), size, seed))
        records = []
        for _ in range(header["n_records"]):
            rid, iid = rd.take("<ii")
            pose_vec = rd.array("<f8", 7)
            size = rd.array("<f8", 3)
            records.append(ObservationRecord(rid, iid, rd.cloud(), Pose(pose_vec[:4], pose_vec[4:]),
                                             size))
    except struct.error as err:
        raise DatasetFormatError(f"{path}: truncated dataset") from err
    if rd.off != len(body):
        raise DatasetFormatError(f"{path}: trailing bytes after records")
    return Dataset(cats, instances, records, header["n_points"], header["obs_points"],
                   header["meta"])
