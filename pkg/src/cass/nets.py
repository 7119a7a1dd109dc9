"""Network definitions for shape-space learning and pose regression.

All forward functions take batched arrays: clouds are ``(B, P, 3)``.  The
point encoder is a single parameter set used at two call sites (canonical
shape embedding and pose-dependent geometric features) unless the model
is built with ``siamese=False``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

MIN_POINTS = 8

VAE_GROUPS = ("point_encoder", "canon_heads", "obs_encoder", "decoder")
POSE_GROUPS = ("pho_encoder", "geo_encoder", "pose_head")


@dataclass
class ArchConfig:
    latent_dim: int = 64
    n_points: int = 128
    enc_widths: tuple = (64, 128)
    obs_widths: tuple = (64, 128)
    dec_widths: tuple = (256, 128)
    head_widths: tuple = (256, 128, 64)
    template: str = "grid"          # grid | ellipsoid
    coord_scale: float = 10.0       # meters -> network units
    vae: bool = True
    siamese: bool = True
    cass_input: bool = True

    def __post_init__(self):
        if self.template not in ("grid", "ellipsoid"):
            raise ValueError(f"unknown decoder template {self.template!r}")
        for name in ("enc_widths", "obs_widths", "dec_widths", "head_widths"):
            setattr(self, name, tuple(int(w) for w in getattr(self, name)))

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def template_points(kind, n):
    """Fixed primitive the decoder folds: a 2D lattice or a unit-sphere set."""
    if kind == "grid":
        rows = int(np.floor(np.sqrt(n)))
        while n % rows:
            rows -= 1
        cols = n // rows
        u, v = np.meshgrid(np.linspace(-1, 1, rows), np.linspace(-1, 1, cols), indexing="ij")
        return np.stack([u.ravel(), v.ravel()], axis=1)
    # Fibonacci sphere
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.cos(phi), np.sin(theta) * np.sin(phi)], axis=1)


@dataclass
class LatentCode:
    mu: Tensor
    logvar: Tensor
    z: Tensor


@dataclass
class CassModel:
    arch: ArchConfig
    params: dict = field(default_factory=dict)
    grid: np.ndarray = None

    @classmethod
    def build(cls, arch=None, seed=0):
        arch = arch or ArchConfig()
        rng = np.random.default_rng(seed)
        model = cls(arch)
        N = arch.latent_dim
        e1, e2 = arch.enc_widths
        o1, o2 = arch.obs_widths
        d1, d2 = arch.dec_widths
        h1, h2, h3 = arch.head_widths
        tdim = 2 if arch.template == "grid" else 3

        def dense(prefix, fan_in, fan_out, zero=False):
            bound = 1.0 / np.sqrt(fan_in)
            for suffix, shape in (("W", (fan_in, fan_out)), ("b", (fan_out,))):
                data = np.zeros(shape) if zero else rng.uniform(-bound, bound, shape)
                model.params[f"{prefix}.{suffix}"] = Tensor(data, requires_grad=True,
                                                            name=f"{prefix}.{suffix}")

        encoders = ["point_encoder"] if arch.siamese else ["point_encoder", "geo_encoder"]
        for enc in encoders:
            dense(f"{enc}.l1", 3, e1)
            dense(f"{enc}.l2", e1, e2)
            dense(f"{enc}.l3", e2, N)
        dense("canon_heads.mu", N, N)
        if arch.vae:
            dense("canon_heads.logvar", N, N, zero=True)
        dense("obs_encoder.geo", 3, o1)
        dense("obs_encoder.rgb", 3, o1)
        dense("obs_encoder.fuse", 2 * o1, o2)
        dense("obs_encoder.out", o2, N)
        dense("obs_encoder.mu", N, N)
        if arch.vae:
            dense("obs_encoder.logvar", N, N, zero=True)
        dense("pho_encoder.l1", 6, e1)
        dense("pho_encoder.l2", e1, e2)
        dense("pho_encoder.l3", e2, N)
        dense("decoder.l1", N + tdim, d1)
        dense("decoder.l2", d1, d2)
        dense("decoder.l3", d2, 3)
        n_feat = 3 * N if arch.cass_input else 2 * N
        dense("pose_head.l1", n_feat, h1)
        dense("pose_head.l2", h1, h2)
        dense("pose_head.l3", h2, h3)
        dense("pose_head.l4", h3, 7)
        model.grid = template_points(arch.template, arch.n_points)
        return model

    # parameter bookkeeping

    def group(self, *prefixes):
        return {k: v for k, v in self.params.items() if k.split(".")[0] in prefixes}

    def vae_params(self):
        return self.group(*VAE_GROUPS)

    def pose_params(self):
        return self.group(*POSE_GROUPS)

    def n_params(self, *prefixes):
        sel = self.group(*prefixes) if prefixes else self.params
        return int(np.sum([p.size for p in sel.values()]))

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise ValueError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def save(self, path, extra_meta=None):
        meta = {"arch": self.arch.to_dict()}
        meta.update(extra_meta or {})
        tc.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path):
        state, meta = tc.load_checkpoint(path)
        model = cls.build(ArchConfig.from_dict(meta["arch"]))
        model.load_state_dict(state)
        return model, meta

    # building blocks

    def _dense(self, prefix, x):
        return tc.linear(x, self.params[prefix + ".W"], self.params[prefix + ".b"])

    def _hidden(self, prefix, x):
        return tc.relu(tc.layer_norm(self._dense(prefix, x)))

    # encoders

    def encode_points(self, points, encoder="point_encoder"):
        """Max-pooled per-point features of ``(B, P, 3)`` clouds in meters."""
        x = _as_cloud_batch(points) * self.arch.coord_scale
        h = self._hidden(f"{encoder}.l1", x)
        h = self._hidden(f"{encoder}.l2", h)
        h = self._dense(f"{encoder}.l3", h)
        return tc.max(h, axis=1)

    def canonical_code(self, points, noise=None):
        g = self.encode_points(points)
        return self._code("canon_heads", g, noise)

    def encode_observation(self, points, colors, noise=None):
        """View-factorized code of centered observations ``(B, P, 3)``."""
        x = _as_cloud_batch(points) * self.arch.coord_scale
        c = _as_cloud_batch(colors)
        hg = tc.relu(tc.layer_norm(self._dense("obs_encoder.geo", x)))
        hc = tc.relu(tc.layer_norm(self._dense("obs_encoder.rgb", c)))
        h = self._hidden("obs_encoder.fuse", tc.concat([hg, hc], axis=-1))
        h = tc.relu(self._dense("obs_encoder.out", h))
        return self._code("obs_encoder", tc.mean(h, axis=1), noise)

    def _code(self, prefix, g, noise):
        mu = self._dense(f"{prefix}.mu", g)
        if not self.arch.vae:
            return LatentCode(mu, None, mu)
        logvar = self._dense(f"{prefix}.logvar", g)
        if noise is None:
            return LatentCode(mu, logvar, mu)
        return LatentCode(mu, logvar, tc.reparameterize(mu, logvar, noise))

    def encode_photometric(self, points, colors):
        if colors is None:
            raise ValueError("photometric encoder needs colors")
        x = _as_cloud_batch(points) * self.arch.coord_scale
        c = _as_cloud_batch(colors)
        h = self._hidden("pho_encoder.l1", tc.concat([c, x], axis=-1))
        h = self._hidden("pho_encoder.l2", h)
        h = self._dense("pho_encoder.l3", h)
        return tc.mean(h, axis=1)

    def encode_geometry(self, points):
        """Pose-dependent geometric feature (shares the point encoder when Siamese)."""
        return self.encode_points(points, "point_encoder" if self.arch.siamese else "geo_encoder")

    # decoder

    def decode_latent(self, z):
        """Fold the template into ``(B, M, 3)`` canonical clouds in meters."""
        z = tc._t(z)
        if z.ndim == 1:
            z = tc.reshape(z, (1, -1))
        if z.shape[-1] != self.arch.latent_dim:
            raise tc.ShapeError(f"latent has {z.shape[-1]} dims, expected {self.arch.latent_dim}")
        N = self.arch.latent_dim
        W1, b1 = self.params["decoder.l1.W"], self.params["decoder.l1.b"]
        # concat(z, g) @ W1 split into its latent and template row blocks
        hz = tc.linear(z, W1[:N], b1)                           # (B, d1)
        hg = tc.linear(Tensor._wrap(self.grid), W1[N:])         # (M, d1)
        h = tc.reshape(hz, (z.shape[0], 1, -1)) + hg
        h = tc.relu(tc.layer_norm(h))
        h = self._hidden("decoder.l2", h)
        out = self._dense("decoder.l3", h)
        return out * (1.0 / self.arch.coord_scale)

    # pose

    def pose_head(self, f_vf, f_pho, f_geo):
        """Raw 7-vector → (unit quaternion ``(B, 4)``, translation offset ``(B, 3)``).

        The translation part is in meters relative to the observation
        centroid; see :func:`observation_pose`.
        """
        feats = [f_vf, f_pho, f_geo] if self.arch.cass_input else [f_pho, f_geo]
        h = tc.concat(feats, axis=-1)
        for layer in ("l1", "l2", "l3"):
            h = self._hidden(f"pose_head.{layer}", h)
        out = self._dense("pose_head.l4", h)
        q = normalize_quaternion(out[:, :4])
        t = out[:, 4:] * (1.0 / self.arch.coord_scale)
        return q, t

    def features(self, points, colors, noise=None):
        """Centered observation → (latent code, f_pho, f_geo, centroid)."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 2:
            pts = pts[None]
            colors = None if colors is None else np.asarray(colors)[None]
        if pts.shape[1] < MIN_POINTS:
            raise ValueError(f"need at least {MIN_POINTS} points, got {pts.shape[1]}")
        if colors is None:
            colors = np.zeros_like(pts)
        centroid = pts.mean(axis=1, keepdims=True)
        centered = pts - centroid
        code = self.encode_observation(centered, colors, noise)
        f_pho = self.encode_photometric(centered, colors)
        f_geo = self.encode_geometry(centered)
        return code, f_pho, f_geo, centroid[:, 0, :]

    def predict(self, points, colors):
        """Inference (no sampling noise) for a batch of observations.

        Returns a dict of numpy arrays: ``q``, ``t``, ``cloud``, ``size`` and
        the three feature vectors.
        """
        code, f_pho, f_geo, centroid = self.features(points, colors)
        q, t_off = self.pose_head(code.mu, f_pho, f_geo)
        cloud = self.decode_latent(code.z).data
        return {
            "q": q.data, "t": t_off.data + centroid, "cloud": cloud,
            "size": cloud.max(axis=1) - cloud.min(axis=1),
            "f_vf": code.mu.data, "f_pho": f_pho.data, "f_geo": f_geo.data,
        }


def _as_cloud_batch(x):
    x = tc._t(x)
    if x.ndim == 2:
        x = tc.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise tc.ShapeError(f"expected (B, P, 3) clouds, got {x.shape}")
    if x.shape[1] < MIN_POINTS:
        raise ValueError(f"need at least {MIN_POINTS} points, got {x.shape[1]}")
    return x


def normalize_quaternion(raw, eps=1e-8):
    """Unit quaternions with ``w >= 0`` from raw ``(B, 4)`` outputs."""
    raw = tc._t(raw)
    n = tc.reshape(tc.sqrt(tc.sum(tc.square(raw), axis=-1) + eps * eps), (-1, 1))
    sign = np.where(raw.data[:, :1] < 0, -1.0, 1.0)
    return raw * sign / n


def quaternion_to_rotation_t(q):
    """Transposed rotation matrices ``(B, 3, 3)`` from unit quaternions.

    Transposed so that row-vector clouds rotate as ``X @ Rt``.
    """
    w, x, y, z = (q[:, i] for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz, wx, wy, wz = x * y, x * z, y * z, w * x, w * y, w * z
    one = np.ones(q.shape[0])
    entries = [
        one - 2 * (yy + zz), 2 * (xy + wz), 2 * (xz - wy),
        2 * (xy - wz), one - 2 * (xx + zz), 2 * (yz + wx),
        2 * (xz + wy), 2 * (yz - wx), one - 2 * (xx + yy),
    ]
    return tc.reshape(tc.stack(entries, axis=-1), (-1, 3, 3))


def transform_points(q, t, points):
    """Apply batched poses to ``(B, M, 3)`` canonical clouds."""
    Rt = quaternion_to_rotation_t(q)
    B = q.shape[0]
    return tc.matmul(points, Rt) + tc.reshape(t, (B, 1, 3))
