import numpy as np
import pytest

from config import build_config
from conftest import random_cloud
from detector import MiddleSpec, VoxelNet, anchor_probabilities, reshape_to_bev, shape_plan, split_from_bev
from errors import ShapeError
from nn_kernels.grad_check import grad_check
from nn_kernels.layers import Deconv
from targets_loss import build_targets, make_anchor_grid, match_anchors, total_loss
from voxel_pipeline import augment_with_centroid, build_buffers, collate_buffers


def test_car_shape_plan():
    plan = dict(shape_plan(build_config("car"), batch_size=2))
    assert plan["grid"] == (10, 400, 352)
    assert plan["vfe.3"] == (20000, 128)
    assert plan["sparse_tensor"] == (2, 128, 10, 400, 352)
    assert plan["middle.3"] == (2, 64, 2, 400, 352)
    assert plan["bev"] == (2, 128, 400, 352)
    assert plan["rpn.block1"] == (2, 128, 200, 176)
    assert plan["rpn.block2"] == (2, 128, 100, 88)
    assert plan["rpn.block3"] == (2, 256, 50, 44)
    assert plan["rpn.concat"] == (2, 768, 200, 176)
    assert plan["rpn.score"] == (2, 2, 200, 176)
    assert plan["rpn.reg"] == (2, 14, 200, 176)


def test_pedestrian_head_resolution():
    plan = dict(shape_plan(build_config("pedestrian")))
    assert plan["bev"] == (1, 128, 200, 240)
    assert plan["rpn.score"] == (1, 2, 100, 120)


def test_softmax_head_channels():
    config = build_config("reduced", {"model": {"head": "softmax2"}})
    plan = dict(shape_plan(config))
    assert plan["rpn.score"][1] == 4
    assert plan["rpn.reg"][1] == 14


def test_middle_spec_rejects_mismatched_channels():
    spec = MiddleSpec.default(16, 8)
    assert spec.layers[0].c_in == 16
    with pytest.raises(ShapeError):
        MiddleSpec((spec.layers[0], spec.layers[0]))


def test_bev_reshape_layout(rng):
    x = rng.normal(size=(2, 3, 4, 5, 6))
    bev = reshape_to_bev(x, expected_depth=4)
    assert bev.shape == (2, 12, 5, 6)
    # (c, d) 位于合并通道 c·D + d
    assert np.array_equal(bev[1, 2 * 4 + 3], x[1, 2, 3])
    assert np.array_equal(split_from_bev(bev, 4), x)
    with pytest.raises(ShapeError):
        reshape_to_bev(x, expected_depth=2)


def test_anchor_probabilities_softmax_pairs():
    logits = np.zeros((1, 4, 1, 1))
    logits[0, 1] = 2.0
    logits[0, 2] = 3.0
    probs = anchor_probabilities(logits, "softmax2")
    assert probs.shape == (1, 2, 1, 1)
    assert probs[0, 0, 0, 0] == pytest.approx(1.0 / (1.0 + np.exp(-2.0)))
    assert probs[0, 1, 0, 0] == pytest.approx(1.0 / (1.0 + np.exp(3.0)))


def _tiny_batch(config, rng, frames=2):
    buffers = []
    for _ in range(frames):
        cloud = random_cloud(rng, config.voxel.range, 600)
        buffers.append(augment_with_centroid(build_buffers(cloud, config.voxel)))
    return collate_buffers(buffers)


def test_tiny_forward_shapes(tiny_config, rng):
    model = VoxelNet(tiny_config)
    assert model.grid == (10, 40, 40)
    assert model.bev_depth == 2
    assert model.head_shape == (20, 20)
    score, reg = model.forward(_tiny_batch(tiny_config, rng))
    assert score.shape == (2, 2, 20, 20)
    assert reg.shape == (2, 14, 20, 20)
    probs = model.probabilities(score)
    assert np.all((probs > 0) & (probs < 1))


def test_grid_mismatch_rejected(tiny_config, reduced_config, rng):
    model = VoxelNet(tiny_config)
    with pytest.raises(ShapeError):
        model.forward(_tiny_batch(reduced_config, rng, frames=1))


def test_full_network_gradient(tiny_config, rng):
    config = tiny_config
    model = VoxelNet(config).astype(np.float64).train()
    batch = _tiny_batch(config, rng)
    batch.features = batch.features.astype(np.float64)
    grid = make_anchor_grid(config.target, model.head_shape, config.voxel.range)
    gts = [np.array([[4.0, 0.5, -1.0, 3.9, 1.6, 1.56, 0.2]]), np.array([[2.5, -1.5, -1.0, 3.9, 1.6, 1.56, 1.4]])]
    targets = build_targets([match_anchors(grid, g, config.target) for g in gts])

    def loss_value():
        score, reg = model.forward(batch)
        return total_loss(score, reg, targets, alpha=1.5, beta=1.0).total

    score, reg = model.forward(batch)
    result = total_loss(score, reg, targets, alpha=1.5, beta=1.0)
    model.zero_grad()
    model.backward((result.grad_score, result.grad_reg))
    params = model.named_parameters()
    names = ["rpn.reg_head.weight", "rpn.score_head.bias", "rpn.upsample2.0_up2.weight", "middle.0_conv3d1.weight",
             "feature_net.vfe1.fcn.linear.weight"]
    assert isinstance(model.rpn.upsamples[1].layers[0], Deconv)
    inputs = [params[f"voxelnet.{n}"].data for n in names]
    grads = [params[f"voxelnet.{n}"].grad for n in names]
    report = grad_check(loss_value, inputs, grads, h=1e-5, tol=1e-3, max_entries=8, rng=rng)
    assert report.passed, report.summary()
