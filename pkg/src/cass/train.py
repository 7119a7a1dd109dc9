"""Losses, batch mixing, the three-stage schedule and ablation switches."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .nets import ArchConfig, CassModel, VAE_GROUPS, transform_points
from .tensorcore import Tensor

log = logging.getLogger(__name__)

ABLATIONS = ("none", "no_cass", "no_bm", "no_dm", "no_vae")


@dataclass
class TrainConfig:
    latent_dim: int = 64
    n_points: int = 128
    obs_points: int = 96
    kl_weight: float = 1e-4
    lr: float = 1e-3
    lr_finetune: float = 1e-4  # stage-3 starting rate
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-6
    iters_s1: int = 4000
    iters_s2: int = 4000
    iters_s3: int = 2000
    lr_decay_every: int = 2000
    batch_size: int = 8
    mix_ratio: float = 0.5
    align_weight: float = 1.0
    seed: int = 0
    ablation: str = "none"
    symmetric_categories: tuple = ("bottle", "bowl", "can")
    template: str = "grid"
    log_every: int = 50
    test_fraction: float = 0.2

    def __post_init__(self):
        if isinstance(self.symmetric_categories, str):
            self.symmetric_categories = tuple(s for s in self.symmetric_categories.split(",") if s)
        self.symmetric_categories = tuple(self.symmetric_categories)
        if min(self.iters_s1, self.iters_s2, self.iters_s3) <= 0:
            raise ValueError("stage iteration counts must be positive")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")
        if self.lr <= 0 or self.lr_finetune <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.mix_ratio < 1 and not (self.mix_ratio == 1.0):
            raise ValueError("mix_ratio must lie in (0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")

    def iters(self, stage):
        return {1: self.iters_s1, 2: self.iters_s2, 3: self.iters_s3}[stage]

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            kind = types[key]
            if kind == "int":
                kwargs[key] = int(value)
            elif kind == "float":
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_text())

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)


def full_scale_config(**overrides):
    """Full-scale settings: N=1024, M=500, 80K/80K/40K iterations, lr 1e-4."""
    base = dict(latent_dim=1024, n_points=500, obs_points=500, lr=1e-4, lr_finetune=1e-4,
                iters_s1=80_000, iters_s2=80_000, iters_s3=40_000, lr_decay_every=40_000)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# ablations

@dataclass
class AblationPlan:
    arch: ArchConfig
    batch_mixing: bool = True
    latent_alignment: bool = False
    use_kl: bool = True


def apply_ablation(config, arch=None):
    """Translate ``config.ablation`` into an architecture and training switches."""
    if config.ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {config.ablation!r}")
    arch = arch or ArchConfig(latent_dim=config.latent_dim, n_points=config.n_points,
                              template=config.template)
    d = asdict(arch)
    plan = AblationPlan(arch)
    if config.ablation == "no_cass":
        d["cass_input"] = False
    elif config.ablation == "no_dm":
        d["siamese"] = False
    elif config.ablation == "no_vae":
        d["vae"] = False
        plan.use_kl = False
    elif config.ablation == "no_bm":
        plan.batch_mixing = False
        plan.latent_alignment = True
    plan.arch = ArchConfig(**d)
    return plan


def build_model(config):
    plan = apply_ablation(config)
    return CassModel.build(plan.arch, seed=config.seed), plan


# ---------------------------------------------------------------------------
# losses

def nearest_indices(a, b):
    """Nearest-neighbor indices both ways between batched clouds.

    Returns ``(ia, ib)``: for every point of ``a`` its nearest point in ``b``
    and vice versa.
    """
    d2 = (np.sum(a * a, axis=-1)[:, :, None] + np.sum(b * b, axis=-1)[:, None, :]
          - 2.0 * a @ np.swapaxes(b, 1, 2))
    return np.argmin(d2, axis=2), np.argmin(d2, axis=1)


def chamfer_batch(a, b):
    """Per-item Chamfer distance of ``(B, n, 3)`` and ``(B, m, 3)`` tensors.

    Nearest-neighbor assignments are found without gradient; distances to
    the gathered neighbors are differentiated.
    """
    a, b = tc._t(a), tc._t(b)
    ia, ib = nearest_indices(a.data, b.data)
    nb = tc.gather(b, np.repeat(ia[..., None], 3, axis=-1), axis=1)
    na = tc.gather(a, np.repeat(ib[..., None], 3, axis=-1), axis=1)
    return tc.mean(tc.norm(a - nb, axis=-1), axis=1) + tc.mean(tc.norm(b - na, axis=-1), axis=1)


def kl_divergence(mu, logvar):
    """Per-item KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims."""
    mu = tc._t(mu)
    if logvar is None:
        return tc.sum(mu * 0.0, axis=-1)
    logvar = tc._t(logvar)
    return tc.sum(tc.exp(logvar) + tc.square(mu) - logvar - 1.0, axis=-1) * 0.5


def cass_objective(recon_canon, canon, recon_obs, target_obs, mu, logvar, kl_weight):
    """Reconstruction of both modalities plus weighted KL.

    Either modality may be ``None``.  Returns ``(loss, terms)``; every term
    is a batch mean.
    """
    terms = {}
    total = None
    if recon_canon is not None:
        terms["recon_canon"] = tc.mean(chamfer_batch(recon_canon, canon))
    if recon_obs is not None:
        terms["recon_obs"] = tc.mean(chamfer_batch(recon_obs, target_obs))
    if mu is not None and kl_weight > 0:
        terms["kl"] = tc.mean(kl_divergence(mu, logvar))
    for name, value in terms.items():
        value = value * kl_weight if name == "kl" else value
        total = value if total is None else total + value
    if total is None:
        raise ValueError("empty batch")
    return total, terms


def pose_loss_batch(q, t, gt_q, gt_t, canon, symmetric):
    """Per-item pose loss for batched predictions.

    Non-symmetric items: mean distance between the canonical points under
    the two poses.  Symmetric items: Chamfer distance between the two
    transformed clouds.
    """
    canon = np.asarray(canon, dtype=np.float64)
    gt_pts = transform_points(Tensor._wrap(np.asarray(gt_q, dtype=np.float64)),
                              Tensor._wrap(np.asarray(gt_t, dtype=np.float64)), canon).data
    pred_pts = transform_points(q, t, canon)
    sym = np.asarray(symmetric, dtype=bool)
    pointwise = tc.mean(tc.norm(pred_pts - gt_pts, axis=-1), axis=1)
    if not sym.any():
        return pointwise
    relaxed = chamfer_batch(pred_pts, gt_pts)
    return pointwise * (~sym).astype(np.float64) + relaxed * sym.astype(np.float64)


def loss_pose(pred, gt, canonical, symmetric=False):
    """Pose loss of one prediction (``geom3d.Pose`` objects)."""
    pts = canonical.points if hasattr(canonical, "points") else np.asarray(canonical)
    out = pose_loss_batch(Tensor(pred.q[None]), Tensor(pred.t[None]), gt.q[None], gt.t[None],
                          pts[None], [symmetric])
    return float(out.data[0])


# ---------------------------------------------------------------------------
# data

@dataclass
class TrainingData:
    """Stacked arrays for fast batch assembly.

    Observation arrays are indexed by record, canonical arrays by instance.
    """
    canon_points: np.ndarray            # (I, M, 3)
    obs_points: np.ndarray              # (R, P, 3)
    obs_colors: np.ndarray              # (R, P, 3)
    obs_canon: np.ndarray               # (R, M, 3) paired ground-truth canonical clouds
    obs_q: np.ndarray                   # (R, 4)
    obs_t: np.ndarray                   # (R, 3)
    obs_symmetric: np.ndarray           # (R,)
    obs_category: list = field(default_factory=list)
    obs_record_ids: np.ndarray = None

    @classmethod
    def from_records(cls, dataset, records, instances, obs_points, symmetric_categories):
        canon = np.stack([inst.canonical.points for inst in instances])
        pts, cols, pair, qs, ts, sym, cats = [], [], [], [], [], [], []
        for rec in records:
            inst = dataset.instance(rec.instance_id)
            p, c = fixed_size(rec.observed.points, rec.observed.colors, obs_points, rec.record_id)
            pts.append(p)
            cols.append(c)
            pair.append(inst.canonical.points)
            qs.append(rec.gt_pose.q)
            ts.append(rec.gt_pose.t)
            sym.append(inst.category.name in symmetric_categories)
            cats.append(inst.category.name)
        return cls(canon, np.stack(pts), np.stack(cols), np.stack(pair), np.stack(qs),
                   np.stack(ts), np.array(sym), cats,
                   np.array([r.record_id for r in records]))

    @classmethod
    def from_dataset(cls, dataset, config, split="train"):
        train, test = dataset.split(config.test_fraction)
        records = train if split == "train" else test
        ids = {r.instance_id for r in records}
        instances = [inst for inst in dataset.instances if inst.instance_id in ids]
        return cls.from_records(dataset, records, instances, config.obs_points,
                                config.symmetric_categories)


def fixed_size(points, colors, n, seed):
    """Subsample or pad (by repeating points) an observation to exactly ``n`` points."""
    k = len(points)
    if colors is None:
        colors = np.zeros_like(points)
    if k == n:
        return points, colors
    rng = np.random.default_rng([seed, 7])
    if k > n:
        idx = np.sort(rng.choice(k, n, replace=False))
    else:
        idx = np.concatenate([np.arange(k), rng.choice(k, n - k, replace=True)])
    return points[idx], colors[idx]


@dataclass
class MixedBatch:
    canon_idx: np.ndarray
    obs_idx: np.ndarray

    @property
    def size(self):
        return len(self.canon_idx) + len(self.obs_idx)


def mix_batch(n_canonical, n_observation, size, ratio, seed):
    """Draw ``ceil(ratio * size)`` canonical items and the rest observations."""
    if n_canonical <= 0 or n_observation <= 0:
        raise ValueError("empty pool")
    if size < 2:
        raise ValueError("mixed batch size must be at least 2")
    rng = np.random.default_rng(seed)
    k = min(size, int(math.ceil(ratio * size - 1e-12)))
    return MixedBatch(_draw(rng, n_canonical, k), _draw(rng, n_observation, size - k))


def _draw(rng, n, k):
    if k == 0:
        return np.zeros(0, dtype=int)
    return rng.choice(n, size=k, replace=k > n)


# ---------------------------------------------------------------------------
# training

class TrainingAborted(RuntimeError):
    pass


def _observation_inputs(data, idx):
    pts = data.obs_points[idx]
    centroid = pts.mean(axis=1, keepdims=True)
    return pts - centroid, data.obs_colors[idx], centroid[:, 0, :]


class Trainer:
    """Owns one model and runs the stages on one dataset.

    Stage 1 optimizes the shape-space VAE, stage 2 the pose-dependent
    extractors and pose head with the VAE frozen, stage 3 everything.
    """

    def __init__(self, config, data, model=None, plan=None):
        self.config = config
        self.data = data
        if model is None:
            model, plan = build_model(config)
        self.model = model
        self.plan = plan or apply_ablation(config)
        self.curves = []

    # batches

    def _rng(self, stage, it):
        return np.random.default_rng([self.config.seed, stage, it])

    def _batch(self, stage, it):
        cfg, data = self.config, self.data
        n_c, n_o = len(data.canon_points), len(data.obs_points)
        if stage == 2:
            rng = self._rng(stage, it)
            return MixedBatch(np.zeros(0, dtype=int), _draw(rng, n_o, cfg.batch_size))
        if self.plan.batch_mixing:
            return mix_batch(n_c, n_o, cfg.batch_size, cfg.mix_ratio, [cfg.seed, stage, it])
        rng = self._rng(stage, it)
        if it % 2 == 0:
            return MixedBatch(_draw(rng, n_c, cfg.batch_size), np.zeros(0, dtype=int))
        return MixedBatch(np.zeros(0, dtype=int), _draw(rng, n_o, cfg.batch_size))

    # losses

    def cass_loss(self, batch, rng, with_pose=False):
        """Shape-space loss on a batch; optionally adds the pose loss."""
        model, data, cfg = self.model, self.data, self.config
        N = model.arch.latent_dim
        codes, recon_targets = [], []
        terms_in = {}
        if len(batch.canon_idx):
            X = data.canon_points[batch.canon_idx]
            noise = rng.standard_normal((len(X), N)) if self.plan.use_kl else None
            codes.append(model.canonical_code(X, noise))
            terms_in["canon"] = X
        pose_terms = {}
        if len(batch.obs_idx):
            centered, colors, centroid = _observation_inputs(data, batch.obs_idx)
            noise = rng.standard_normal((len(centered), N)) if self.plan.use_kl else None
            code = model.encode_observation(centered, colors, noise)
            codes.append(code)
            terms_in["obs"] = data.obs_canon[batch.obs_idx]
            if with_pose:
                f_pho = model.encode_photometric(centered, colors)
                f_geo = model.encode_geometry(centered)
                q, t_off = model.pose_head(code.mu, f_pho, f_geo)
                pose_terms["pose"] = self._pose_loss(q, t_off, centroid, batch.obs_idx)
            if self.plan.latent_alignment:
                target = model.canonical_code(terms_in["obs"]).mu.detach()
                pose_terms["align"] = tc.mean(
                    tc.sum(tc.square(code.mu - target), axis=-1)) * cfg.align_weight
        # the projector of a non-mixed model does not shape the decoder
        only_obs = not self.plan.batch_mixing and "canon" not in terms_in
        recon_c = recon_o = None
        if "canon" in terms_in:
            recon_c = model.decode_latent(codes[0].z)
        if "obs" in terms_in:
            recon_o = self._decode(codes[-1].z, detach=only_obs)
        mu = tc.concat([c.mu for c in codes], axis=0)
        logvar = (tc.concat([c.logvar for c in codes], axis=0) if self.plan.use_kl else None)
        total, terms = cass_objective(recon_c, terms_in.get("canon"), recon_o, terms_in.get("obs"),
                                      mu, logvar, cfg.kl_weight if self.plan.use_kl else 0.0)
        for name, value in pose_terms.items():
            total = total + value
            terms[name] = value
        return total, terms

    def _decode(self, z, detach):
        if not detach:
            return self.model.decode_latent(z)
        params = self.model.params
        saved = {k: params[k] for k in params if k.startswith("decoder.")}
        try:
            for k, v in saved.items():
                params[k] = v.detach()
            return self.model.decode_latent(z)
        finally:
            params.update(saved)

    def _pose_loss(self, q, t_off, centroid, idx):
        data = self.data
        t = t_off + centroid
        per_item = pose_loss_batch(q, t, data.obs_q[idx], data.obs_t[idx], data.obs_canon[idx],
                                   data.obs_symmetric[idx])
        return tc.mean(per_item)

    def pose_loss(self, batch):
        centered, colors, centroid = _observation_inputs(self.data, batch.obs_idx)
        code = self.model.encode_observation(centered, colors)
        f_pho = self.model.encode_photometric(centered, colors)
        f_geo = self.model.encode_geometry(centered)
        q, t_off = self.model.pose_head(code.mu, f_pho, f_geo)
        loss = self._pose_loss(q, t_off, centroid, batch.obs_idx)
        return loss, {"pose": loss}

    # stages

    def trainable(self, stage):
        if stage == 1:
            return self.model.vae_params()
        if stage == 2:
            return self.model.pose_params()
        return dict(self.model.params)

    def run_stage(self, stage, snapshot_dir=None, progress=None):
        """Optimize one stage in place; returns the logged loss rows."""
        cfg, model = self.config, self.model
        trainable = self.trainable(stage)
        frozen = [p for k, p in model.params.items() if k not in trainable]
        for p in frozen:
            p.requires_grad = False
        base_lr = cfg.lr_finetune if stage == 3 else cfg.lr
        opt = tc.Adam(trainable.values(), lr=base_lr, beta1=cfg.beta1, beta2=cfg.beta2,
                      weight_decay=cfg.weight_decay)
        rows = []
        try:
            for it in range(cfg.iters(stage)):
                opt.lr = base_lr * 0.1 ** (it // cfg.lr_decay_every)
                batch = self._batch(stage, it)
                rng = self._rng(stage, it)
                opt.zero_grad()
                try:
                    with tc.Graph() as g:
                        if stage == 2:
                            loss, terms = self.pose_loss(batch)
                        else:
                            loss, terms = self.cass_loss(batch, rng, with_pose=(stage == 3))
                        g.backward(loss)
                    opt.step()
                except tc.NonFiniteError as err:
                    self._snapshot(snapshot_dir, stage, it, err)
                    raise TrainingAborted(f"stage {stage} iteration {it}: {err}") from err
                if it % cfg.log_every == 0 or it == cfg.iters(stage) - 1:
                    rows.append((stage, it, "total", float(loss.data)))
                    rows.extend((stage, it, k, float(v.data)) for k, v in terms.items())
                    if progress:
                        progress(stage, it, float(loss.data))
        finally:
            for p in frozen:
                p.requires_grad = True
        self.curves.extend(rows)
        return rows

    def _snapshot(self, snapshot_dir, stage, it, err):
        if snapshot_dir is None:
            return
        path = Path(snapshot_dir) / f"abort_stage{stage}_it{it}.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        self.model.save(path, {"abort": str(err), "stage": stage, "iteration": it})
        log.error("non-finite loss; snapshot written to %s", path)

    def run(self, stages=(1, 2, 3), **kwargs):
        for s in stages:
            self.run_stage(s, **kwargs)
        return self.model


def run_stage(stage, config, model, data, plan=None, **kwargs):
    """Functional wrapper: train ``model`` for one stage; returns (model, rows)."""
    trainer = Trainer(config, data, model, plan)
    rows = trainer.run_stage(stage, **kwargs)
    return model, rows


def write_curves(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "iteration", "term", "value"])
        for stage, it, term, value in rows:
            w.writerow([stage, it, term, repr(value)])


def stage_loss_summary(rows, stage, term="total", window=5):
    """Mean of the first and last ``window`` logged values of a term."""
    vals = [v for s, _, t, v in rows if s == stage and t == term]
    return float(np.mean(vals[:window])), float(np.mean(vals[-window:]))
