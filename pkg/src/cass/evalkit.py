"""Evaluation: pass-fraction mAP, reconstruction tables, AP curves, probes.

Detections are perfect in the synthetic pipeline, so the average precision
of a criterion is the fraction of records that satisfy it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import geom3d
from .geom3d import Pose, PointCloud

CM = 0.01

# name -> (kind, threshold...) ; IoU is a strict lower bound, pose errors strict upper bounds
CRITERIA = {
    "IoU25": ("iou", 0.25),
    "IoU50": ("iou", 0.50),
    "5d5cm": ("pose", 5.0, 5.0),
    "10d5cm": ("pose", 10.0, 5.0),
    "10d10cm": ("pose", 10.0, 10.0),
    # toy-scale analog of the strictest column
    "10d2cm": ("pose", 10.0, 2.0),
}
# one row per (run, category), one column per metric
REPORT_METRICS = ["n", "IoU25", "IoU50", "5d5cm", "10d5cm", "10d10cm", "10d2cm",
                  "CD", "EMD", "rot_median_deg", "trans_median_cm"]
REPORT_COLUMNS = ["run", "category"] + REPORT_METRICS
STRICT_TOY_CRITERION = "10d2cm"


@dataclass
class PredictionRecord:
    record_id: int
    category: str
    pred_pose: Pose
    pred_size: np.ndarray
    pred_cloud: PointCloud
    gt_pose: Pose
    gt_size: np.ndarray
    gt_canonical: PointCloud
    symmetry_axis: tuple = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def rotation_error(self):
        if "rot" not in self._cache:
            self._cache["rot"] = geom3d.rotation_error(self.pred_pose, self.gt_pose,
                                                       self.symmetry_axis)
        return self._cache["rot"]

    def translation_error(self):
        return geom3d.translation_error(self.pred_pose, self.gt_pose)

    def iou(self, samples=100_000, seed=0):
        key = ("iou", samples, seed)
        if key not in self._cache:
            self._cache[key] = _record_iou(self, samples, seed)
        return self._cache[key]


def _record_iou(rec, samples, seed):
    R_pred = rec.pred_pose.R
    if rec.symmetry_axis is not None:
        R_pred = geom3d.align_about_axis(R_pred, rec.gt_pose.R, rec.symmetry_axis)
    pred_pose = Pose.from_matrix(R_pred, rec.pred_pose.t)
    size_pred = np.maximum(np.asarray(rec.pred_size, dtype=np.float64), 1e-6)
    box_p = geom3d.box_from_pose(pred_pose, size_pred, geom3d.aabb_center(rec.pred_cloud))
    box_g = geom3d.box_from_pose(rec.gt_pose, rec.gt_size, geom3d.aabb_center(rec.gt_canonical))
    return geom3d.box_iou_3d(box_p, box_g, samples, seed)


def passes(rec, criterion, iou_samples=100_000, seed=0):
    kind = criterion[0]
    if kind == "iou":
        return rec.iou(iou_samples, seed) > criterion[1]
    if kind == "pose":
        return (rec.rotation_error() < criterion[1]
                and rec.translation_error() < criterion[2] * CM)
    raise ValueError(f"unknown criterion {criterion!r}")


def _criterion(criterion):
    if isinstance(criterion, str):
        try:
            return CRITERIA[criterion]
        except KeyError:
            raise ValueError(f"unknown criterion {criterion!r}") from None
    return tuple(criterion)


def compute_map(preds, criterion, iou_samples=100_000, seed=0):
    """Fraction of records satisfying ``criterion`` (a name or tuple)."""
    if not preds:
        raise ValueError("no predictions")
    crit = _criterion(criterion)
    return float(np.mean([passes(p, crit, iou_samples, seed) for p in preds]))


def _resample(points, n, rng):
    if len(points) == n:
        return points
    return points[np.sort(rng.choice(len(points), n, replace=False))]


def record_recon(rec, seed=0):
    """(CD, EMD) of one record; EMD resamples both clouds to the smaller count."""
    a, b = rec.pred_cloud.points, rec.gt_canonical.points
    cd = geom3d.chamfer(a, b)
    n = min(len(a), len(b), geom3d.EMD_MAX_POINTS)
    rng = np.random.default_rng([seed, rec.record_id])
    return cd, geom3d.emd(_resample(a, n, rng), _resample(b, n, rng))


def recon_table(preds, seed=0):
    """Per-category and overall mean CD (x1e-3) and EMD.

    Returns ``{category: {"n", "CD", "EMD"}}`` with an ``"overall"`` row.
    """
    if not preds:
        raise ValueError("no predictions")
    rows = {}
    values = [(p.category, *record_recon(p, seed)) for p in preds]
    for cat in sorted({v[0] for v in values}) + ["overall"]:
        sel = [v for v in values if cat == "overall" or v[0] == cat]
        rows[cat] = {"n": len(sel), "CD": 1e3 * float(np.mean([v[1] for v in sel])),
                     "EMD": float(np.mean([v[2] for v in sel]))}
    return rows


@dataclass
class MetricReport:
    rows: dict  # category -> column -> value

    @property
    def overall(self):
        return self.rows["overall"]

    def table(self, run=""):
        """Rows for :func:`write_rows`, one per category."""
        return [dict(row, run=run, category=cat) for cat, row in self.rows.items()]

    def to_csv(self, path, run=""):
        write_rows(path, self.table(run))


def write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if k in REPORT_METRICS and k != "n" else v)
                        for k, v in row.items()})


def read_rows(path):
    """Inverse of :func:`write_rows`: ``{run: {category: {metric: value}}}``."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {m: float(row[m]) for m in REPORT_METRICS if row.get(m) not in (None, "")}
            out.setdefault(row["run"], {})[row["category"]] = vals
    return out


def metric_report(preds, iou_samples=100_000, seed=0, with_recon=True):
    if not preds:
        raise ValueError("no predictions")
    recon = recon_table(preds, seed) if with_recon else {}
    rows = {}
    cats = sorted({p.category for p in preds})
    for cat in cats + ["overall"]:
        sel = [p for p in preds if cat == "overall" or p.category == cat]
        row = {"n": len(sel)}
        for name in CRITERIA:
            row[name] = compute_map(sel, name, iou_samples, seed)
        row["rot_median_deg"] = float(np.median([p.rotation_error() for p in sel]))
        row["trans_median_cm"] = float(np.median([p.translation_error() for p in sel])) / CM
        if with_recon:
            row["CD"] = recon[cat]["CD"]
            row["EMD"] = recon[cat]["EMD"]
        rows[cat] = row
    return MetricReport(rows)


# AP curves

DEFAULT_SWEEP = {
    "iou": np.linspace(0.0, 1.0, 21),
    "rotation": np.linspace(0.0, 60.0, 25),
    "translation": np.linspace(0.0, 10.0, 21),
}


def ap_curves(preds, sweep=None, iou_samples=100_000, seed=0):
    """AP vs threshold per category.

    Rotation curves ignore translation and vice versa.  Returns rows of
    ``(category, axis, threshold, ap)``.
    """
    sweep = DEFAULT_SWEEP if sweep is None else sweep
    if not sweep or any(len(v) == 0 for v in sweep.values()):
        raise ValueError("empty sweep")
    for key, grid in sweep.items():
        if np.any(np.diff(grid) < 0):
            raise ValueError(f"{key} thresholds must be non-decreasing")
    rows = []
    cats = sorted({p.category for p in preds}) + ["overall"]
    for cat in cats:
        sel = [p for p in preds if cat == "overall" or p.category == cat]
        for axis, grid in sweep.items():
            for thr in grid:
                if axis == "iou":
                    crit = ("iou", thr)
                elif axis == "rotation":
                    crit = ("pose", thr, np.inf)
                else:
                    crit = ("pose", np.inf, thr)
                rows.append((cat, axis, float(thr), compute_map(sel, crit, iou_samples, seed)))
    return rows


def write_curves_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "axis", "threshold", "ap"])
        w.writerows(rows)


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]
_AXIS_LABEL = {"iou": "3D IoU", "rotation": "rotation error (deg)",
               "translation": "translation error (cm)"}


def curves_svg(rows, path, width=300, height=220):
    """One panel per axis, one polyline per category."""
    axes = list(dict.fromkeys(r[1] for r in rows))
    cats = list(dict.fromkeys(r[0] for r in rows))
    pad = 36
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width * len(axes)}" '
             f'height="{height + 20 * len(cats)}" font-family="sans-serif" font-size="10">']
    for k, axis in enumerate(axes):
        x0 = k * width
        pts = [r for r in rows if r[1] == axis]
        lo, hi = min(r[2] for r in pts), max(r[2] for r in pts)
        span = hi - lo or 1.0

        def sx(v):
            return x0 + pad + (v - lo) / span * (width - 2 * pad)

        def sy(v):
            return height - pad - v * (height - 2 * pad)

        parts.append(f'<rect x="{x0 + pad}" y="{pad}" width="{width - 2 * pad}" '
                     f'height="{height - 2 * pad}" fill="none" stroke="#999"/>')
        parts.append(f'<text x="{x0 + width / 2}" y="{height - 8}" text-anchor="middle">'
                     f'{_AXIS_LABEL.get(axis, axis)}</text>')
        parts.append(f'<text x="{x0 + 4}" y="{pad - 6}">AP</text>')
        for v in (0.0, 0.5, 1.0):
            parts.append(f'<text x="{x0 + pad - 4}" y="{sy(v) + 3:.1f}" text-anchor="end">{v:g}</text>')
        for c, cat in enumerate(cats):
            line = [(sx(r[2]), sy(r[3])) for r in pts if r[0] == cat]
            coords = " ".join(f"{x:.1f},{y:.1f}" for x, y in line)
            parts.append(f'<polyline fill="none" stroke="{_PALETTE[c % len(_PALETTE)]}" '
                         f'stroke-width="1.5" points="{coords}"/>')
    for c, cat in enumerate(cats):
        y = height + 14 + 20 * c
        parts.append(f'<line x1="10" y1="{y - 4}" x2="30" y2="{y - 4}" '
                     f'stroke="{_PALETTE[c % len(_PALETTE)]}" stroke-width="2"/>')
        parts.append(f'<text x="36" y="{y}">{cat}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


# inference over a dataset

def predict_records(model, dataset, records, batch_size=64, obs_points=None):
    """Run the model (no sampling noise) on observation records."""
    from .train import fixed_size

    out = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        n = obs_points or max(len(r.observed) for r in chunk)
        arrays = [fixed_size(r.observed.points, r.observed.colors, n, r.record_id) for r in chunk]
        pts = np.stack([a[0] for a in arrays])
        cols = np.stack([a[1] for a in arrays])
        res = model.predict(pts, cols)
        for i, rec in enumerate(chunk):
            inst = dataset.instance(rec.instance_id)
            cloud = PointCloud(res["cloud"][i])
            out.append(PredictionRecord(
                rec.record_id, inst.category.name, Pose(res["q"][i], res["t"][i]),
                res["size"][i], cloud, rec.gt_pose, np.asarray(inst.size), inst.canonical,
                inst.category.symmetry_axis))
    return out


def oracle_predictions(dataset, records):
    """Ground truth dressed up as predictions (every metric must be perfect)."""
    out = []
    for rec in records:
        inst = dataset.instance(rec.instance_id)
        out.append(PredictionRecord(rec.record_id, inst.category.name, rec.gt_pose,
                                    np.asarray(inst.size), inst.canonical, rec.gt_pose,
                                    np.asarray(inst.size), inst.canonical,
                                    inst.category.symmetry_axis))
    return out


# view-factorization probe

@dataclass
class ProbeReport:
    median_error: dict  # feature name -> median test error (deg)
    chance: float       # same probe on Gaussian noise features
    n_train: int
    n_test: int
    untrained: dict = None  # feature name -> error of the reference (untrained) network

    def ratio(self, worse="f_vf", better="f_geo"):
        return self.median_error[worse] / self.median_error[better]

    def chance_level(self, feature="f_vf"):
        """Error of the feature at initialization, or the noise level without a reference."""
        if self.untrained is None:
            return self.chance
        return self.untrained[feature]


def probe_errors(features, rotations, symmetry_axes, train_idx, test_idx):
    """Least-squares map from features to 6D rotations; test errors in degrees.

    For symmetric records only the axis counts, so the regressed column
    closest to the axis is orthonormalized first and the (arbitrary) spin
    column cannot tilt it.
    """
    X = np.hstack([features, np.ones((len(features), 1))])
    Y = geom3d.rotation_6d(rotations)
    coef, *_ = np.linalg.lstsq(X[train_idx], Y[train_idx], rcond=None)
    raw = X[test_idx] @ coef
    errs = []
    for v, i in zip(raw, test_idx):
        axis = symmetry_axes[i]
        primary = 0 if axis is None or abs(axis[0]) >= abs(axis[1]) else 1
        R_p = geom3d.rotation_from_6d(v, primary)
        errs.append(geom3d.rotation_error(Pose.from_matrix(R_p), Pose.from_matrix(rotations[i]),
                                          axis))
    return np.array(errs)


def _probe_features(model, records, batch_size):
    from .train import fixed_size

    feats = {"f_vf": [], "f_geo": [], "f_pho": []}
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        n = max(len(r.observed) for r in chunk)
        arrays = [fixed_size(r.observed.points, r.observed.colors, n, r.record_id) for r in chunk]
        res = model.predict(np.stack([a[0] for a in arrays]), np.stack([a[1] for a in arrays]))
        for k in feats:
            feats[k].append(res[k])
    return {k: np.vstack(v) for k, v in feats.items()}


def factorization_probe(model, dataset, records=None, train_fraction=0.5, seed=0,
                        batch_size=64, reference=None):
    """Linear rotation probes on the view-factorized code and the geometric feature.

    ``chance`` is the same probe fit on Gaussian noise features.  When
    ``reference`` (typically the network at initialization) is given, its
    features are probed on the same split and reported under ``untrained``.
    """
    records = dataset.records if records is None else records
    if len(records) < 50:
        raise ValueError(f"probe needs at least 50 samples, got {len(records)}")
    rotations = np.stack([r.gt_pose.R for r in records])
    axes = [dataset.category_of(r).symmetry_axis for r in records]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(records))
    n_train = int(round(train_fraction * len(records)))
    train_idx, test_idx = perm[:n_train], perm[n_train:]

    def medians(net):
        return {k: float(np.median(probe_errors(v, rotations, axes, train_idx, test_idx)))
                for k, v in _probe_features(net, records, batch_size).items()}

    noise = rng.standard_normal((len(records), model.arch.latent_dim))
    chance = float(np.median(probe_errors(noise, rotations, axes, train_idx, test_idx)))
    untrained = medians(reference) if reference is not None else None
    return ProbeReport(medians(model), chance, len(train_idx), len(test_idx), untrained)
