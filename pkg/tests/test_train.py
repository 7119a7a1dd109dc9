import csv

import numpy as np
import pytest

from cass import tensorcore as tc
from cass.geom3d import Pose, axis_angle_to_quat
from cass.nets import ArchConfig
from cass.shapegen import generate_dataset
from cass.tensorcore import Tensor
from cass.train import (ABLATIONS, MixedBatch, TrainConfig, Trainer, TrainingAborted,
                        TrainingData, apply_ablation, build_model, cass_objective, chamfer_batch,
                        kl_divergence, loss_pose, mix_batch, full_scale_config, pose_loss_batch,
                        write_curves)

from conftest import check_gradients, rel_error


# --- objective ------------------------------------------------------------

def test_cass_objective_zero_and_kl_closed_form(rng):
    X = rng.standard_normal((2, 16, 3))
    mu = np.zeros((4, 8))
    total, terms = cass_objective(Tensor(X), X, Tensor(X), X, Tensor(mu), Tensor(mu), 1e-3)
    assert float(total.data) == 0.0
    mu[:, 0] = 1.0
    total, terms = cass_objective(Tensor(X), X, Tensor(X), X, Tensor(mu), Tensor(np.zeros((4, 8))), 1e-3)
    assert float(total.data) == pytest.approx(0.5e-3, abs=1e-15)
    assert float(terms["kl"].data) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        cass_objective(None, None, None, None, None, None, 1e-3)


def test_kl_matches_monte_carlo(rng):
    mu, lv = np.array([0.3, -0.7]), np.array([0.2, -0.5])
    s = np.exp(0.5 * lv)
    z = mu + s * rng.standard_normal((400_000, 2))
    logq = -0.5 * np.sum(((z - mu) / s) ** 2 + lv, axis=1)
    logp = -0.5 * np.sum(z ** 2, axis=1)
    mc = np.mean(logq - logp)
    assert abs(float(kl_divergence(Tensor(mu), Tensor(lv)).data) - mc) < 5e-3


def test_chamfer_batch_matches_geometry(rng):
    from cass.geom3d import chamfer
    a, b = rng.standard_normal((3, 10, 3)), rng.standard_normal((3, 7, 3))
    got = chamfer_batch(Tensor(a), Tensor(b)).data
    assert np.allclose(got, [chamfer(a[i], b[i]) for i in range(3)], atol=1e-12)


def test_cass_objective_gradient_four_points(rng):
    canon = rng.standard_normal((2, 4, 3))
    target = rng.standard_normal((2, 4, 3))

    def build(rc, ro, mu, lv):
        return cass_objective(rc, canon, ro, target, mu, lv, 0.1)[0]
    arrays = [canon + 0.1 * rng.standard_normal(canon.shape),
              target + 0.1 * rng.standard_normal(target.shape),
              rng.standard_normal((4, 3)), 0.3 * rng.standard_normal((4, 3))]
    assert check_gradients(build, arrays) < 1e-4


@pytest.mark.parametrize("symmetric", [False, True])
def test_pose_loss_gradient_four_points(rng, symmetric):
    canon = rng.standard_normal((2, 4, 3))
    gt_q = np.array([axis_angle_to_quat([0, 1, 0], 0.4), axis_angle_to_quat([1, 0, 0], -0.2)])
    gt_t = rng.standard_normal((2, 3))

    def build(raw, t):
        from cass.nets import normalize_quaternion
        return tc.mean(pose_loss_batch(normalize_quaternion(raw), t, gt_q, gt_t, canon,
                                       [symmetric, symmetric]))
    raw = gt_q + 0.3 * rng.standard_normal((2, 4))
    raw[:, 0] = np.abs(raw[:, 0]) + 0.2
    assert check_gradients(build, [raw, gt_t + 0.2 * rng.standard_normal((2, 3))]) < 1e-4


def full_model_gradient_error(seed=0):
    """Finite-difference check of every model parameter through the full stage-3 loss.

    The encoders need at least 8 points, so this runs on 8-point clouds.
    """
    rng = np.random.default_rng(seed)
    ds = generate_dataset(("bottle", "mug"), instances_per_category=2, views_per_instance=1,
                          n_points=8, obs_points=8, visibility=1.0)
    cfg = TrainConfig(latent_dim=3, n_points=8, obs_points=8, batch_size=4)
    arch = ArchConfig(latent_dim=3, n_points=8, enc_widths=(4, 4), obs_widths=(4, 4),
                      dec_widths=(4, 4), head_widths=(4, 4, 4))
    data = TrainingData.from_records(ds, ds.records, ds.instances, 8, cfg.symmetric_categories)
    plan = apply_ablation(cfg, arch)
    from cass.nets import CassModel
    model = CassModel.build(plan.arch, seed=seed)
    tr = Trainer(cfg, data, model, plan)
    batch = MixedBatch(np.array([0, 1]), np.array([0, 3]))

    def value():
        return float(tr.cass_loss(batch, np.random.default_rng(5), with_pose=True)[0].data)

    for p in model.params.values():
        p.grad = None
    with tc.Graph() as g:
        g.backward(tr.cass_loss(batch, np.random.default_rng(5), with_pose=True)[0])
    worst = 0.0
    step = 1e-6
    for name, p in model.params.items():
        num = np.zeros_like(p.data)
        for i in np.ndindex(p.data.shape):
            old = p.data[i]
            p.data[i] = old + step
            hi = value()
            p.data[i] = old - step
            lo = value()
            p.data[i] = old
            num[i] = (hi - lo) / (2 * step)
        ana = p.grad if p.grad is not None else np.zeros_like(num)
        worst = max(worst, rel_error(num, ana))
    return worst


def test_full_model_gradient():
    assert full_model_gradient_error() < 1e-4


# --- pose loss contract -----------------------------------------------------

def ring(n=360, radius=0.05):
    phi = 2 * np.pi * np.arange(n) / n
    return np.stack([radius * np.cos(phi), np.zeros(n), radius * np.sin(phi)], axis=1)


def test_loss_pose_contract(rng):
    X = rng.standard_normal((20, 3)) * 0.05
    gt = Pose(axis_angle_to_quat([1, 2, 3], 0.7), [0.1, 0.0, 0.8])
    assert loss_pose(gt, gt, X) == 0.0
    d = np.array([0.01, -0.02, 0.005])
    moved = Pose(gt.q, gt.t + d)
    assert loss_pose(moved, gt, X) == pytest.approx(np.linalg.norm(d), abs=1e-15)
    R = ring()
    spun = gt.compose(Pose(axis_angle_to_quat([0, 1, 0], 0.9), [0, 0, 0]))
    assert loss_pose(spun, gt, R, symmetric=True) < 1e-3
    assert loss_pose(spun, gt, R, symmetric=False) > 0.1 * 0.05


# --- batches ------------------------------------------------------------------

def test_mix_batch():
    b = mix_batch(100, 200, 8, 0.5, seed=3)
    assert len(b.canon_idx) == 4 and len(b.obs_idx) == 4
    again = mix_batch(100, 200, 8, 0.5, seed=3)
    assert np.array_equal(b.canon_idx, again.canon_idx) and np.array_equal(b.obs_idx, again.obs_idx)
    full = mix_batch(100, 200, 8, 1.0, seed=3)
    assert len(full.canon_idx) == 8 and len(full.obs_idx) == 0
    assert len(mix_batch(100, 200, 8, 0.3, seed=0).canon_idx) == 3
    with pytest.raises(ValueError):
        mix_batch(0, 5, 8, 0.5, 0)
    with pytest.raises(ValueError):
        mix_batch(5, 5, 1, 0.5, 0)


# --- config and ablations -----------------------------------------------------

def test_config_text_round_trip(tmp_path):
    cfg = TrainConfig(lr=3e-4, ablation="no_dm", symmetric_categories=("can",))
    path = tmp_path / "c.txt"
    cfg.save(path)
    assert TrainConfig.load(path) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_text("bogus=1\n")
    with pytest.raises(ValueError):
        TrainConfig(ablation="no_x")
    with pytest.raises(ValueError):
        TrainConfig(iters_s2=0)
    with pytest.raises(ValueError):
        TrainConfig(kl_weight=-1)


def test_schedules():
    cfg = TrainConfig()
    assert (cfg.iters_s1, cfg.iters_s2, cfg.iters_s3, cfg.lr_decay_every) == (4000, 4000, 2000, 2000)
    p = full_scale_config()
    assert (p.iters_s1, p.iters_s2, p.iters_s3, p.lr_decay_every) == (80_000, 80_000, 40_000, 40_000)
    assert (p.latent_dim, p.n_points, p.lr, p.lr_finetune, p.batch_size) == (1024, 500, 1e-4, 1e-4, 8)


def test_ablation_parameter_counts():
    base, _ = build_model(TrainConfig())
    N, d1 = 64, base.arch.head_widths[0]
    no_cass, _ = build_model(TrainConfig(ablation="no_cass"))
    assert base.n_params("pose_head") - no_cass.n_params("pose_head") == N * d1
    no_dm, _ = build_model(TrainConfig(ablation="no_dm"))
    assert no_dm.n_params() - base.n_params() == base.n_params("point_encoder")
    no_vae, plan = build_model(TrainConfig(ablation="no_vae"))
    assert not plan.use_kl
    assert not any("logvar" in k for k in no_vae.params)
    pts = np.random.default_rng(0).uniform(-0.05, 0.05, (2, 16, 3))
    code = no_vae.canonical_code(pts, noise=np.ones((2, N)))
    assert np.array_equal(code.z.data, code.mu.data)
    _, bm = build_model(TrainConfig(ablation="no_bm"))
    assert not bm.batch_mixing and bm.latent_alignment
    assert set(ABLATIONS) == {"none", "no_cass", "no_bm", "no_dm", "no_vae"}


# --- trainer ------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny():
    ds = generate_dataset(instances_per_category=5, views_per_instance=2, n_points=32,
                          obs_points=24)
    cfg = TrainConfig(latent_dim=8, n_points=32, obs_points=24, iters_s1=6, iters_s2=6,
                      iters_s3=6, lr_decay_every=3, log_every=2)
    return ds, cfg


def fresh(tiny, **changes):
    ds, cfg = tiny
    cfg = cfg.replace(**changes)
    return Trainer(cfg, TrainingData.from_dataset(ds, cfg))


def test_learning_rate_schedule(tiny, monkeypatch):
    seen = []
    step = tc.Adam.step

    def recording(self):
        seen.append(self.lr)
        step(self)
    monkeypatch.setattr(tc.Adam, "step", recording)
    tr = fresh(tiny, lr=1e-2, lr_finetune=1e-3)
    for s in (1, 2, 3):
        tr.run_stage(s)
    expect = [1e-2, 1e-2, 1e-2, 1e-3, 1e-3, 1e-3] * 2 + [1e-3, 1e-3, 1e-3, 1e-4, 1e-4, 1e-4]
    assert np.allclose(seen, expect, rtol=1e-12)


def test_stage2_freezes_vae(tiny):
    tr = fresh(tiny)
    tr.run_stage(1)
    before = {k: v.data.copy() for k, v in tr.model.vae_params().items()}
    pose_before = {k: v.data.copy() for k, v in tr.model.pose_params().items()}
    tr.run_stage(2)
    for k, v in tr.model.vae_params().items():
        assert v.data.tobytes() == before[k].tobytes(), k
    assert any(not np.array_equal(v.data, pose_before[k])
               for k, v in tr.model.pose_params().items())
    assert all(p.requires_grad for p in tr.model.params.values())


def test_training_is_deterministic(tiny, tmp_path):
    paths = []
    for i in range(2):
        tr = fresh(tiny)
        tr.run()
        paths.append(tmp_path / f"m{i}.ckpt")
        tr.model.save(paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_gradient_sharing(tiny):
    tr = fresh(tiny)
    batch = mix_batch(len(tr.data.canon_points), len(tr.data.obs_points), 8, 0.5, 0)
    grads = {}
    for term in ("recon_canon", "recon_obs"):
        tr.model.params["decoder.l1.W"].grad = None
        with tc.Graph() as g:
            _, terms = tr.cass_loss(batch, np.random.default_rng(0))
            g.backward(terms[term])
        grads[term] = tr.model.params["decoder.l1.W"].grad.copy()
    assert np.abs(grads["recon_canon"]).sum() > 0
    assert np.abs(grads["recon_obs"]).sum() > 0


def test_no_bm_batches_and_alignment(tiny):
    tr = fresh(tiny, ablation="no_bm")
    b0, b1 = tr._batch(1, 0), tr._batch(1, 1)
    assert len(b0.obs_idx) == 0 and len(b1.canon_idx) == 0
    for p in tr.model.params.values():
        p.grad = None
    with tc.Graph() as g:
        loss, terms = tr.cass_loss(b1, np.random.default_rng(0))
        g.backward(loss)
    assert "align" in terms
    assert tr.model.params["decoder.l1.W"].grad is None
    assert tr.model.params["point_encoder.l1.W"].grad is None
    assert np.abs(tr.model.params["obs_encoder.mu.W"].grad).sum() > 0


def test_mixed_batches_have_both_modalities(tiny):
    tr = fresh(tiny)
    for it in range(5):
        b = tr._batch(1, it)
        assert len(b.canon_idx) == 4 and len(b.obs_idx) == 4


def test_nan_aborts_with_snapshot(tiny, tmp_path):
    tr = fresh(tiny)
    tr.data.obs_points[:] = np.nan
    with pytest.raises(TrainingAborted):
        tr.run_stage(1, snapshot_dir=tmp_path)
    assert list(tmp_path.glob("abort_stage1_*.ckpt"))


def test_loss_curves_csv(tiny, tmp_path):
    tr = fresh(tiny)
    rows = tr.run_stage(1)
    path = tmp_path / "curves.csv"
    write_curves(rows, path)
    with open(path) as fh:
        got = list(csv.reader(fh))
    assert got[0] == ["stage", "iteration", "term", "value"]
    assert {r[2] for r in got[1:]} >= {"total", "recon_canon", "recon_obs", "kl"}
    assert [int(r[1]) for r in got[1:] if r[2] == "total"] == [0, 2, 4, 5]
