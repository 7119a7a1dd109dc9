"""Acceptance criteria 1-8.

Each test prints one ``criterion N: PASS|FAIL`` line (also repeated in the
terminal summary).  Criteria 4-7 share one session fixture that trains all
five ablations on the toy defaults, which takes roughly half an hour on one
CPU core.  Set ``CASS_ACCEPTANCE_DIR`` to keep (and reuse) those runs.
"""

import csv
import itertools
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from cass import cli, evalkit, geom3d as g3, shapegen
from cass import tensorcore as tc
from cass.geom3d import OrientedBox, Pose
from cass.nets import CassModel, normalize_quaternion
from cass.tensorcore import Tensor
from cass.train import (ABLATIONS, TrainConfig, build_model, cass_objective, chamfer_batch,
                        loss_pose, pose_loss_batch, stage_loss_summary)

import conftest
from conftest import check_gradients
from test_tensorcore import PRIMITIVES


def verdict(capsys, number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# --- 1: gradients -------------------------------------------------------------

def eq1_four_point(rng):
    canon = rng.standard_normal((2, 4, 3))
    target = rng.standard_normal((2, 4, 3))

    def build(rc, ro, mu, lv):
        return cass_objective(rc, canon, ro, target, mu, lv, 0.1)[0]
    return build, [canon + 0.1 * rng.standard_normal(canon.shape),
                   target + 0.1 * rng.standard_normal(target.shape),
                   rng.standard_normal((4, 3)), 0.3 * rng.standard_normal((4, 3))]


def eq2_four_point(rng, symmetric):
    canon = rng.standard_normal((2, 4, 3))
    gt_q = np.array([g3.axis_angle_to_quat([0, 1, 0], 0.4), g3.axis_angle_to_quat([1, 0, 0], -0.2)])
    gt_t = rng.standard_normal((2, 3))

    def build(raw, t):
        return tc.mean(pose_loss_batch(normalize_quaternion(raw), t, gt_q, gt_t, canon,
                                       [symmetric, symmetric]))
    raw = gt_q + 0.3 * rng.standard_normal((2, 4))
    raw[:, 0] = np.abs(raw[:, 0]) + 0.2
    return build, [raw, gt_t + 0.2 * rng.standard_normal((2, 3))]


def test_criterion_1_gradients(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    errors = {}
    for name, (build, shapes) in sorted(PRIMITIVES.items()):
        errors[name] = check_gradients(build, [rng.standard_normal(s) for s in shapes])
    errors["eq1"] = check_gradients(*eq1_four_point(rng))
    errors["eq2"] = check_gradients(*eq2_four_point(rng, False))
    errors["eq2_symmetric"] = check_gradients(*eq2_four_point(rng, True))
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 60
    verdict(capsys, 1, ok, f"{len(errors)} checks, worst rel err {errors[worst]:.2e} ({worst}), "
                           f"{elapsed:.1f}s")


# --- 2: metric oracles --------------------------------------------------------

def brute_chamfer(a, b):
    d = np.array([[np.linalg.norm(x - y) for y in b] for x in a])
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def brute_emd(a, b):
    d = np.linalg.norm(a[:, None] - b[None], axis=-1)
    perms = np.array(list(itertools.permutations(range(len(b)))))
    return d[np.arange(len(a)), perms].mean(axis=1).min()


def aligned_iou(ca, ha, cb, hb):
    lo = np.maximum(ca - ha, cb - hb)
    hi = np.minimum(ca + ha, cb + hb)
    inter = np.prod(np.clip(hi - lo, 0, None))
    return inter / (np.prod(2 * ha) + np.prod(2 * hb) - inter)


def test_criterion_2_metric_oracles(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {"chamfer": 0.0, "emd": 0.0, "iou_exact": 0.0, "iou_mc": 0.0, "rotation": 0.0}
    for n in range(1, 9):
        for _ in range(3):
            a, b = rng.standard_normal((n, 3)), rng.standard_normal((rng.integers(1, 9), 3))
            worst["chamfer"] = max(worst["chamfer"], abs(g3.chamfer(a, b) - brute_chamfer(a, b)))
            c = rng.standard_normal((n, 3))
            worst["emd"] = max(worst["emd"], abs(g3.emd(a, c) - brute_emd(a, c)))
    for _ in range(20):
        ca, cb = rng.uniform(-0.3, 0.3, (2, 3))
        ha, hb = rng.uniform(0.1, 0.5, (2, 3))
        got = g3.box_iou_3d(OrientedBox(ca, ha, [1, 0, 0, 0]), OrientedBox(cb, hb, [1, 0, 0, 0]))
        worst["iou_exact"] = max(worst["iou_exact"], abs(got - aligned_iou(ca, ha, cb, hb)))
    # a quarter turn about z swaps x/y extents: same solid, but the sampling path runs
    quarter = g3.axis_angle_to_quat([0, 0, 1], np.pi / 2)
    for _ in range(4):
        ca, cb = rng.uniform(-0.3, 0.3, (2, 3))
        ha, hb = rng.uniform(0.1, 0.5, (2, 3))
        turned = OrientedBox(cb, hb[[1, 0, 2]], quarter)
        got = g3.box_iou_3d(OrientedBox(ca, ha, [1, 0, 0, 0]), turned, samples=1_000_000)
        worst["iou_mc"] = max(worst["iou_mc"], abs(got - aligned_iou(ca, ha, cb, hb)))
    for i in range(200):
        base = Pose(g3.random_quaternion(rng), rng.uniform(-1, 1, 3))
        angle = rng.uniform(0, np.pi) if i % 2 else 10 ** rng.uniform(-6, 0)
        moved = base.compose(Pose.from_axis_angle(rng.standard_normal(3), angle))
        worst["rotation"] = max(worst["rotation"],
                                abs(g3.rotation_error(moved, base) - np.degrees(angle)))
        spin = Pose.from_axis_angle([0, 1, 0], rng.uniform(0, 2 * np.pi))
        tilt = Pose.from_axis_angle(np.cross([0, 1, 0], rng.standard_normal(3)), angle)
        sym = base.compose(tilt).compose(spin)
        worst["rotation"] = max(worst["rotation"], abs(
            g3.rotation_error(sym, base, symmetry_axis=(0, 1, 0)) - np.degrees(angle)))
    elapsed = time.perf_counter() - t0
    ok = (max(v for k, v in worst.items() if k != "iou_mc") < 1e-9 and worst["iou_mc"] < 1e-2
          and elapsed < 60)
    verdict(capsys, 2, ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" {elapsed:.1f}s")


# --- 3: pose loss contract ----------------------------------------------------

def test_criterion_3_pose_loss_contract(capsys):
    rng = np.random.default_rng(2)
    X = rng.standard_normal((50, 3)) * 0.05
    gt = Pose(g3.axis_angle_to_quat([1, 2, 3], 0.7), [0.1, 0.0, 0.8])
    zero = loss_pose(gt, gt, X)
    d = np.array([0.01, -0.02, 0.005])
    offset = abs(loss_pose(Pose(gt.q, gt.t + d), gt, X) - np.linalg.norm(d))
    radius = 0.05
    phi = 2 * np.pi * np.arange(360) / 360
    ring = np.stack([radius * np.cos(phi), np.zeros(360), radius * np.sin(phi)], axis=1)
    spun = gt.compose(Pose.from_axis_angle([0, 1, 0], 0.9))
    relaxed = loss_pose(spun, gt, ring, symmetric=True)
    strict = loss_pose(spun, gt, ring, symmetric=False)
    ok = zero == 0.0 and offset < 1e-15 and relaxed < 1e-3 and strict > 0.1 * radius
    verdict(capsys, 3, ok, f"L(gt,gt)={zero} |L(d)-|d||={offset:.1e} "
                           f"relaxed={relaxed:.2e} point-wise={strict:.4f}")


# --- shared toy training ------------------------------------------------------

@dataclass
class ToyRuns:
    root: Path
    data: Path
    minutes: dict  # ablation -> wall-clock minutes (None when reused)

    def run_dir(self, ablation):
        return self.root / f"{ablation}_runs" / ablation

    def overall(self, ablation):
        return evalkit.read_rows(self.root / f"{ablation}.csv")[ablation]["overall"]

    def model(self, ablation):
        return CassModel.load(self.run_dir(ablation) / "stage3.ckpt")


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    keep = os.environ.get("CASS_ACCEPTANCE_DIR")
    root = Path(keep) if keep else tmp_path_factory.mktemp("acceptance")
    root.mkdir(parents=True, exist_ok=True)
    data = root / "toy.cass"
    if not data.exists():
        assert cli.main(["gen-data", "--out", str(data)]) == 0
    minutes = {}
    for ablation in ABLATIONS:
        table = root / f"{ablation}.csv"
        if table.exists():
            minutes[ablation] = None
            continue
        t0 = time.perf_counter()
        assert cli.main(["ablate", "--data", str(data), "--ablations", ablation,
                         "--out", str(table)]) == 0
        minutes[ablation] = (time.perf_counter() - t0) / 60
    return ToyRuns(root, data, minutes)


def held_out_canonical_cd(model, dataset):
    _, test = dataset.split()
    ids = sorted({r.instance_id for r in test})
    X = np.stack([dataset.instance(i).canonical.points for i in ids])
    rec = model.decode_latent(model.canonical_code(X).mu).data
    return float(chamfer_batch(Tensor(rec), Tensor(X)).data.mean())


def mean_category_diagonal(dataset):
    diag = {}
    for inst in dataset.instances:
        diag.setdefault(inst.category.name, []).append(np.linalg.norm(inst.size))
    return float(np.mean([np.mean(v) for v in diag.values()]))


def test_criterion_4_toy_training(toy, capsys):
    dataset = shapegen.read_dataset(toy.data)
    run = toy.run_dir("none")
    with open(run / "curves_stage1.csv") as fh:
        rows = [(int(r["stage"]), int(r["iteration"]), r["term"], float(r["value"]))
                for r in csv.DictReader(fh)]
    first, last = stage_loss_summary(rows, 1, "total")
    model, _ = toy.model("none")
    limit = 0.1 * mean_category_diagonal(dataset)
    canon_cd = held_out_canonical_cd(model, dataset)
    overall = toy.overall("none")
    obs_cd = overall["CD"] * 1e-3
    rot, trans = overall["rot_median_deg"], overall["trans_median_cm"]
    minutes = toy.minutes.get("none")
    ok = (last < 0.5 * first and canon_cd < limit and obs_cd < limit and rot < 15 and trans < 2)
    timing = f"{minutes:.1f} min" if minutes is not None else "reused run"
    verdict(capsys, 4, ok, f"stage-1 loss {first:.4f}->{last:.4f}; CD canonical {canon_cd:.4f} "
                           f"observed {obs_cd:.4f} (limit {limit:.4f}); rot {rot:.1f} deg, "
                           f"trans {trans:.2f} cm; {timing}")


def test_criterion_5_batch_mixing(toy, capsys):
    full, no_bm = toy.overall("none"), toy.overall("no_bm")
    ok = full["CD"] < no_bm["CD"] and full["EMD"] < no_bm["EMD"]
    verdict(capsys, 5, ok, f"CD(x1e-3) {full['CD']:.3f} vs {no_bm['CD']:.3f}; "
                           f"EMD {full['EMD']:.4f} vs {no_bm['EMD']:.4f}")


def test_criterion_6_ablation_order(toy, capsys):
    col = evalkit.STRICT_TOY_CRITERION
    score = {a: toy.overall(a)[col] for a in ABLATIONS}
    others = [score[a] for a in ABLATIONS if a not in ("none", "no_cass")]
    ok = (score["none"] >= score["no_vae"] and score["none"] > score["no_cass"]
          and score["no_cass"] < min(others))
    verdict(capsys, 6, ok, f"{col}: " + " ".join(f"{a}={v:.3f}" for a, v in score.items()))


def test_criterion_7_view_factorization(toy, capsys):
    dataset = shapegen.read_dataset(toy.data)
    model, meta = toy.model("none")
    reference, _ = build_model(TrainConfig.from_text(meta["config"]))
    probe = evalkit.factorization_probe(model, dataset, reference=reference)
    vf, geo = probe.median_error["f_vf"], probe.median_error["f_geo"]
    chance = probe.chance_level("f_vf")
    ok = vf >= 1.5 * geo and vf >= 0.8 * chance
    verdict(capsys, 7, ok, f"probe f_vf {vf:.1f} deg, f_geo {geo:.1f} deg (ratio {vf / geo:.2f}); "
                           f"untrained f_vf {chance:.1f}, noise {probe.chance:.1f}")


# --- 8: determinism and round trips -------------------------------------------

SHORT = ["--set", "iters_s1=40", "--set", "iters_s2=40", "--set", "iters_s3=20",
         "--set", "lr_decay_every=20", "--set", "log_every=10"]


def test_criterion_8_determinism(toy, tmp_path, capsys):
    checks = {}
    again = tmp_path / "again.cass"
    assert cli.main(["gen-data", "--out", str(again)]) == 0
    checks["dataset regenerated"] = again.read_bytes() == toy.data.read_bytes()

    ds = shapegen.read_dataset(toy.data)
    shapegen.write_dataset(ds, tmp_path / "copy.cass")
    checks["dataset round trip"] = (tmp_path / "copy.cass").read_bytes() == toy.data.read_bytes()
    back = shapegen.read_dataset(tmp_path / "copy.cass")
    checks["dataset arrays"] = all(
        np.array_equal(a.observed.points, b.observed.points)
        and np.array_equal(a.gt_pose.q, b.gt_pose.q) for a, b in zip(ds.records, back.records))
    fresh = shapegen.generate_dataset()
    checks["generated equals file"] = all(
        np.array_equal(a.observed.points, b.observed.points)
        for a, b in zip(fresh.records, ds.records)) and all(
        np.array_equal(a.canonical.points, b.canonical.points)
        for a, b in zip(fresh.instances, ds.instances))

    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["train", "--data", str(toy.data), "--out-dir", str(out), *SHORT]) == 0
        assert cli.main(["eval", "--checkpoint", str(out / "stage3.ckpt"), "--data", str(toy.data),
                         "--out-csv", str(out / "report.csv")]) == 0
        outs.append(out)
    checks["checkpoints"] = all((outs[0] / f"stage{s}.ckpt").read_bytes()
                                == (outs[1] / f"stage{s}.ckpt").read_bytes() for s in (1, 2, 3))
    checks["metric csv"] = (outs[0] / "report.csv").read_bytes() == (outs[1] / "report.csv").read_bytes()

    ckpt = toy.run_dir("none") / "stage3.ckpt"
    model, meta = CassModel.load(ckpt)
    model.save(tmp_path / "copy.ckpt", meta)
    checks["checkpoint round trip"] = (tmp_path / "copy.ckpt").read_bytes() == ckpt.read_bytes()
    for name in ("r1", "r2"):
        assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(toy.data),
                         "--out-csv", str(tmp_path / f"{name}.csv")]) == 0
    checks["toy metric csv"] = (tmp_path / "r1.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()
    failed = [k for k, v in checks.items() if not v]
    verdict(capsys, 8, not failed, f"{len(checks) - len(failed)}/{len(checks)} identical"
                                   + (f"; differs: {', '.join(failed)}" if failed else ""))
