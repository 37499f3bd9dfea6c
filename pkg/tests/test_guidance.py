"""Guidance-path tests: encoding, footprint pooling, contrastive alignment,
and the isolation of ground-truth query decoding from the learned path.

The pooling check uses its own row-stochastic matrix built by scanning every
BEV cell with independently written footprint math, then compares both the
pooled values and the gradient route against the implementation.
"""

import math

import numpy as np
import pytest

from gtbev import autodiff as ad
from gtbev.autodiff import Graph, ShapeError, Tensor
from gtbev.codec import regression_targets
from gtbev.guidance import (Guidance, contrastive_loss, crop_pool,
                            footprint_cells, gt_encode, gt_query_decode,
                            gtqi_loss, init_guidance, object_features)
from gtbev.model import (HeadOutput, ModelConfig, bev_encode, decode, head,
                         init_params)
from gtbev.scene import CameraRig, Geometry, GtInstance, GtScene, ViewFeatures

from gradcheck import check_gradients

GEOM = Geometry()   # +-12.8 m, 16x16 grid, 1.6 m cells


def _inst(x, y, w=1.9, l=4.6, h=1.7, yaw=0.0, class_id=0, vel=(1.0, 0.0),
          attribute_id=1):
    return GtInstance(class_id=class_id, center=(x, y, h / 2), size=(w, l, h),
                      yaw=yaw, velocity=vel, attribute_id=attribute_id)


def _guidance(seed=0, dtype=np.float64):
    return init_guidance(ModelConfig(), seed, dtype=dtype)


# --- gt_encode --------------------------------------------------------------


def test_gt_encode_shape_and_class_sensitivity():
    g = _guidance()
    a = _inst(1.0, 2.0, class_id=0)
    b = _inst(1.0, 2.0, class_id=7)
    out = gt_encode(g, [a, b], GEOM)
    assert out.shape == (2, 32)
    assert np.array_equal(out.numpy(), gt_encode(g, [a, b], GEOM).numpy())
    assert np.linalg.norm(out.numpy()[0] - out.numpy()[1]) > 1e-9


def test_gt_encode_gradients():
    g = _guidance(seed=3)
    instances = [_inst(2.0, -3.0, yaw=0.7), _inst(-5.0, 1.0, class_id=4)]
    w = np.linspace(-1.0, 1.0, 64).reshape(2, 32)

    def f():
        return ad.mean_all(ad.mul(gt_encode(g, instances, GEOM), Tensor(w)))

    check_gradients(f, list(g.params.values()))


# --- crop_pool --------------------------------------------------------------


def oracle_pooling_matrix(instances, geometry):
    """Row-stochastic (N, cells) matrix by scanning every cell center."""
    n_cells = geometry.bev_h * geometry.bev_w
    rows = np.zeros((len(instances), n_cells))
    for i, inst in enumerate(instances):
        half_l, half_w = inst.size[1] / 2.0, inst.size[0] / 2.0
        hx = half_l * abs(math.cos(inst.yaw)) + half_w * abs(math.sin(inst.yaw))
        hy = half_l * abs(math.sin(inst.yaw)) + half_w * abs(math.cos(inst.yaw))
        hit = []
        for flat in range(n_cells):
            iy, ix = divmod(flat, geometry.bev_w)
            xc = -geometry.range_m + (ix + 0.5) * geometry.cell_w
            yc = -geometry.range_m + (iy + 0.5) * geometry.cell_h
            if abs(xc - inst.center[0]) <= hx and abs(yc - inst.center[1]) <= hy:
                hit.append(flat)
        if not hit:
            ix = min(max(int((inst.center[0] + geometry.range_m)
                             / geometry.cell_w), 0), geometry.bev_w - 1)
            iy = min(max(int((inst.center[1] + geometry.range_m)
                             / geometry.cell_h), 0), geometry.bev_h - 1)
            hit = [iy * geometry.bev_w + ix]
        rows[i, hit] = 1.0 / len(hit)
    return rows


def test_constant_field_pools_to_constant():
    z = Tensor(np.full((256, 32), 3.25))
    out = crop_pool(z, _inst(0.3, -0.2, yaw=0.4), GEOM)
    assert out.shape == (32,)
    assert np.abs(out.numpy() - 3.25).max() < 1e-12


def test_two_by_two_footprint_means_four_cells():
    # centers of cells (0,0),(1,0),(0,1),(1,1) are at -12.0 and -10.4 on each
    # axis; a 2x2 m box centered between them covers exactly those four
    inst = _inst(-11.2, -11.2, w=2.0, l=2.0)
    assert sorted(footprint_cells(inst, GEOM)) == [0, 1, 16, 17]
    rng = np.random.default_rng(0)
    z = Tensor(rng.normal(0, 1, size=(256, 32)))
    expect = z.numpy()[[0, 1, 16, 17]].mean(axis=0)
    assert np.abs(crop_pool(z, inst, GEOM).numpy() - expect).max() < 1e-12


def test_sub_cell_box_falls_back_to_center_cell():
    inst = _inst(-11.3, -11.3, w=0.1, l=0.1)
    assert footprint_cells(inst, GEOM) == [0]
    z = Tensor(np.arange(256 * 32, dtype=np.float64).reshape(256, 32))
    assert np.array_equal(crop_pool(z, inst, GEOM).numpy(), z.numpy()[0])


def test_rotation_swaps_footprint_axes():
    # (0.8, 0.8) is the center of cell (8, 8); a 6 m long, 0.5 m wide box
    # reaches the neighbouring centers 1.6 m away only along its long axis
    long_x = footprint_cells(_inst(0.8, 0.8, w=0.5, l=6.0, yaw=0.0), GEOM)
    long_y = footprint_cells(_inst(0.8, 0.8, w=0.5, l=6.0, yaw=math.pi / 2), GEOM)
    assert sorted(long_x) == [135, 136, 137]
    assert sorted(long_y) == [120, 136, 152]


def test_crop_pool_matches_pooling_matrix_and_gradients():
    rng = np.random.default_rng(8)
    instances = [
        _inst(1.0, 2.0, yaw=0.3),
        _inst(-8.0, 6.5, w=0.7, l=0.7, class_id=1),
        _inst(5.0, -9.0, w=2.6, l=8.1, yaw=1.2, class_id=8),
        _inst(12.5, 12.5, w=0.2, l=0.2),          # near the corner, fallback
    ]
    pool = oracle_pooling_matrix(instances, GEOM)
    assert np.abs(pool.sum(axis=1) - 1.0).max() < 1e-12
    z = Tensor(rng.normal(0, 1, size=(256, 32)), requires_grad=True)
    alpha = object_features(z, instances, GEOM)
    assert np.abs(alpha.numpy() - pool @ z.numpy()).max() < 1e-12

    w = rng.normal(0, 1, size=(len(instances), 32))
    with Graph() as g:
        loss = ad.sum_all(ad.mul(object_features(z, instances, GEOM), Tensor(w)))
    grads = g.backward(loss)
    # d(sum(P z * w))/dz = P^T w
    assert np.abs(grads[z] - pool.T @ w).max() < 1e-12


# --- contrastive loss -------------------------------------------------------


def test_single_instance_costs_nothing():
    g = _guidance()
    a = Tensor(np.array([[1.0, 2.0, 3.0]]))
    b = Tensor(np.array([[0.5, -1.0, 2.0]]))
    assert contrastive_loss(a, b, g.params["logit_scale"]).item() == 0.0


def test_empty_scene_costs_nothing():
    g = _guidance()
    z = Tensor(np.zeros((0, 32)))
    assert contrastive_loss(z, z, g.params["logit_scale"]).item() == 0.0


def test_orthonormal_pair_hand_value():
    a = np.zeros((2, 32))
    a[0, 0] = 1.0
    a[1, 1] = 1.0
    unit_scale = Tensor(np.zeros(1))      # exp(0) = 1
    loss = contrastive_loss(Tensor(a), Tensor(a.copy()), unit_scale)
    assert abs(loss.item() - math.log(1.0 + math.exp(-1.0))) < 1e-9


def test_sides_are_interchangeable():
    rng = np.random.default_rng(12)
    a = Tensor(rng.normal(0, 1, size=(6, 32)))
    b = Tensor(rng.normal(0, 1, size=(6, 32)))
    s = Tensor(np.array([0.8]))
    assert abs(contrastive_loss(a, b, s).item()
               - contrastive_loss(b, a, s).item()) < 1e-12


def test_scale_clamp_and_dead_gradient_above_cap():
    rng = np.random.default_rng(4)
    a = Tensor(rng.normal(0, 1, size=(3, 16)))
    b = Tensor(rng.normal(0, 1, size=(3, 16)))
    hot = Tensor(np.array([10.0]), requires_grad=True)     # exp(10) >> 100
    pinned = Tensor(np.array([math.log(100.0)]))
    with Graph() as g:
        loss = contrastive_loss(a, b, hot)
    assert abs(loss.item() - contrastive_loss(a, b, pinned).item()) < 1e-12
    grads = g.backward(loss)
    assert np.all(grads[hot] == 0.0)


def test_alignment_beats_shuffled_rows():
    rng = np.random.default_rng(5)
    a = rng.normal(0, 1, size=(8, 32))
    s = Tensor(np.array([1.0]))
    aligned = contrastive_loss(Tensor(a), Tensor(a.copy()), s).item()
    shuffled = contrastive_loss(Tensor(a), Tensor(a[rng.permutation(8)]), s).item()
    assert aligned < shuffled


def test_contrastive_gradients():
    rng = np.random.default_rng(6)
    a = Tensor(rng.normal(0, 1, size=(4, 8)), requires_grad=True)
    b = Tensor(rng.normal(0, 1, size=(4, 8)), requires_grad=True)
    s = Tensor(np.array([0.5]), requires_grad=True)

    def f():
        return contrastive_loss(a, b, s)

    check_gradients(f, [a, b, s])


def test_rejects_mismatched_rows():
    with pytest.raises(ShapeError, match="contrastive"):
        contrastive_loss(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4))),
                         Tensor(np.zeros(1)))


# --- ground-truth query decoding -------------------------------------------


def _setup(dtype=np.float64, seed=1):
    det = init_params(ModelConfig(), CameraRig(), Geometry(), seed, dtype=dtype)
    g = init_guidance(ModelConfig(), seed + 100, dtype=dtype)
    rng = np.random.default_rng(seed)
    views = [ViewFeatures(data=rng.normal(0, 1, size=(6, 6, 6, 16)).astype(dtype))
             for _ in range(2)]
    scenes = [
        GtScene(scene_id="a", instances=(_inst(1.0, 2.0), _inst(-4.0, 3.0,
                                                                class_id=2))),
        GtScene(scene_id="b", instances=(_inst(0.0, -6.0, class_id=1),
                                         _inst(7.0, 7.0, class_id=5),
                                         _inst(-9.0, -9.0, class_id=9,
                                               attribute_id=0))),
    ]
    return det, g, views, scenes


def test_gt_query_outputs_align_with_scenes():
    det, g, views, scenes = _setup()
    z = bev_encode(det, views).z_bev
    betas = [gt_encode(g, list(s.instances), GEOM) for s in scenes]
    outs = gt_query_decode(det, z, betas)
    assert outs[0].class_logits.shape == (2, 11)
    assert outs[1].class_logits.shape == (3, 11)
    assert outs[1].boxes.shape == (3, 10)
    empty = gt_query_decode(det, z, [None, None])
    assert empty == [None, None]


def test_padded_batch_matches_per_scene_decoding():
    det, g, views, scenes = _setup()
    z = bev_encode(det, views).z_bev
    betas = [gt_encode(g, list(s.instances), GEOM) for s in scenes]
    batched = gt_query_decode(det, z, betas)
    for s, beta in enumerate(betas):
        n = beta.shape[0]
        alone = decode(det,
                       ad.reshape(ad.index_batch(z, s), (1, 256, 32)),
                       ad.reshape(beta, (1, n, 32)))
        solo = head(det, ad.index_batch(alone, 0))
        for got, want in ((batched[s].class_logits, solo.class_logits),
                          (batched[s].attr_logits, solo.attr_logits),
                          (batched[s].boxes, solo.boxes)):
            assert np.abs(got.numpy() - want.numpy()).max() <= 1e-9


def test_learned_path_is_bit_identical_with_guidance_running():
    det, g, views, scenes = _setup(dtype=np.float32)
    with Graph():
        enc = bev_encode(det, views)
        learned_before = decode(det, enc.z_bev)
        betas = [gt_encode(g, list(s.instances), GEOM) for s in scenes]
        gt_query_decode(det, enc.z_bev, betas)
        learned_after = decode(det, enc.z_bev)
    assert np.array_equal(learned_before.numpy(), learned_after.numpy())


def test_gtqi_gradients_skip_learned_queries():
    det, g, views, scenes = _setup(dtype=np.float32)
    with Graph() as graph:
        enc = bev_encode(det, views)
        betas = [gt_encode(g, list(s.instances), GEOM) for s in scenes]
        outs = gt_query_decode(det, enc.z_bev, betas)
        loss = ad.add(gtqi_loss(outs[0], scenes[0], GEOM),
                      gtqi_loss(outs[1], scenes[1], GEOM))
    grads = graph.backward(loss)
    assert grads.get(det.params["query_emb"]) is None
    for name in ("dec0.self.q.w", "dec1.cross.v.w", "head.cls.w2",
                 "head.box.w1", "enc0.cross.k.w"):
        assert float(np.linalg.norm(grads[det.params[name]])) > 1e-30, name
    for name in ("gt_enc.w1", "gt_enc.w2"):
        assert float(np.linalg.norm(grads[g.params[name]])) > 1e-30, name


def test_gtqi_loss_hand_value():
    scene = GtScene(scene_id="s", instances=(_inst(1.0, 2.0),))
    targets = regression_targets(scene.instances, GEOM)
    preds = HeadOutput(class_logits=Tensor(np.zeros((1, 11))),
                       attr_logits=Tensor(np.zeros((1, 2))),
                       boxes=Tensor(targets))
    loss = gtqi_loss(preds, scene, GEOM)
    assert abs(loss.item() - (math.log(11.0) + math.log(2.0))) < 1e-12
    with pytest.raises(ShapeError, match="gtqi"):
        gtqi_loss(preds, GtScene(scene_id="t", instances=()), GEOM)
