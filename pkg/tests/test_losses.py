import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ftl.errors import DimensionError, ParameterError
from ftl.losses import (BalancedBceConfig, SsimConfig, balanced_bce, combined_classification_loss, face_loss,
                        invariance_regularizer, l1_loss, reconstruction_loss, ssim)
from ftl.tensor import Tensor
from ftl.transform import apply, build_block_transform, planar_family, random_params, rotation_family

from oracles import numeric_grad, rel_error, ssim_loops

RNG = np.random.default_rng(5)
C1 = 0.01**2


def pair(shape=(12, 13)):
    x = RNG.uniform(0, 1, shape)
    y = np.clip(x + RNG.normal(0, 0.2, shape), 0, 1)
    return x, y


def grad_check_fn(fn, x, tol):
    t = Tensor(x.copy(), requires_grad=True)
    fn(t).backward()
    num = numeric_grad(lambda a: fn(Tensor(a)).item(), [x.copy()])[0]
    assert rel_error(t.grad, num) <= tol


# -- L1 ------------------------------------------------------------------------

def test_l1_examples():
    x = RNG.uniform(size=(3, 4))
    assert l1_loss(x, x).item() == 0.0
    assert l1_loss(np.zeros((2, 5)), np.ones((2, 5))).item() == 1.0
    y = RNG.uniform(size=(3, 4))
    total = 0.0
    for i in range(3):
        for j in range(4):
            total += abs(x[i, j] - y[i, j])
    assert abs(l1_loss(x, y).item() - total / 12) <= 1e-12


def test_l1_shape_mismatch():
    with pytest.raises(DimensionError):
        l1_loss(np.zeros(3), np.zeros(4))


def test_l1_tie_subgradient_is_zero():
    x = Tensor(np.array([0.5, 0.2]), requires_grad=True)
    l1_loss(x, np.array([0.5, 0.0])).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.5])


def test_l1_gradient():
    x, y = pair((3, 4))
    grad_check_fn(lambda t: l1_loss(t, y), x, 1e-5)


# -- SSIM ----------------------------------------------------------------------------

def test_ssim_window_sums_to_one():
    k = SsimConfig().kernel()
    assert k.shape == (11, 11)
    assert abs(k.sum() - 1.0) <= 1e-15
    with pytest.raises(ParameterError):
        SsimConfig(window=10)


def test_ssim_self_is_exactly_one():
    x = RNG.uniform(size=(16, 16))
    assert ssim(x, x).item() == 1.0


def test_ssim_constant_images_closed_form():
    value = ssim(np.zeros((11, 11)), np.ones((11, 11))).item()
    assert abs(value - C1 / (1 + C1)) <= 1e-12


@pytest.mark.parametrize("shape", [(11, 11), (12, 15), (16, 16)])
def test_ssim_matches_window_loop_oracle(shape):
    x, y = pair(shape)
    assert abs(ssim(x, y).item() - ssim_loops(x, y)) <= 1e-12


def test_ssim_batches_average_planes():
    xs, ys = zip(*(pair((12, 12)) for _ in range(3)))
    want = np.mean([ssim_loops(a, b) for a, b in zip(xs, ys)])
    assert abs(ssim(np.stack(xs), np.stack(ys)).item() - want) <= 1e-12


def test_ssim_too_small():
    with pytest.raises(DimensionError):
        ssim(np.zeros((10, 12)), np.zeros((10, 12)))


def test_ssim_gradient():
    x, y = pair((12, 12))
    grad_check_fn(lambda t: ssim(t, y), x, 1e-4)


# -- face loss -------------------------------------------------------------------------

def test_face_loss_identical_is_zero():
    x = RNG.uniform(size=(12, 12))
    for a in (0.0, 0.3, 0.85, 1.0):
        assert face_loss(x, x, a).item() == 0.0


def test_face_loss_alpha_zero_is_l1_bitwise():
    x, y = pair((2, 14, 14))
    assert face_loss(x, y, 0.0).item() == l1_loss(x, y).item()


def test_face_loss_hand_combination():
    x, y = pair((13, 13))
    want = 0.85 * (1 - ssim_loops(x, y)) / 2 + 0.15 * np.mean(np.abs(x - y))
    assert abs(face_loss(x, y, 0.85).item() - want) <= 1e-12


def test_face_loss_alpha_range():
    with pytest.raises(ParameterError):
        face_loss(np.zeros((11, 11)), np.zeros((11, 11)), 1.5)


def test_face_loss_gradient():
    x, y = pair((12, 12))
    grad_check_fn(lambda t: face_loss(t, y, 0.85), x, 1e-4)


# -- balanced BCE ------------------------------------------------------------------------

def test_bce_symmetric_sanity_case():
    cfg = BalancedBceConfig(gamma=0.5, rescale_targets=False, rescale_outputs=False)
    t = np.array([[1.0, 0.0, 1.0]])
    at_target = balanced_bce(t, t, cfg).item()
    assert at_target <= 1e-10
    assert balanced_bce(np.array([[0.8, 0.3, 0.6]]), t, cfg).item() > at_target
    o = np.array([[0.7, 0.2, 0.9]])
    want = -0.5 * (math.log(0.7) + math.log(0.8) + math.log(0.9))
    assert abs(balanced_bce(o, t, cfg).item() - want) <= 1e-12


def test_bce_single_voxel_full_formula():
    g = 0.98
    # t' = 2, o' = 0.9999: -g t' log o' - (1-g)(1-t') log(1-o')
    want = -g * 2 * math.log(0.9999) - (1 - g) * (1 - 2) * math.log(1 - 0.9999)
    got = balanced_bce(np.array([[1.0]]), np.array([[1.0]])).item()
    assert abs(got - want) <= 1e-12
    # with t' = 2 the second term is negative and dominates: the loss goes below zero
    assert got < 0


def test_bce_monotone_in_output():
    o = np.linspace(0, 1, 41)
    ones = [balanced_bce(np.array([[v]]), np.array([[1.0]])).item() for v in o]
    zeros = [balanced_bce(np.array([[v]]), np.array([[0.0]])).item() for v in o]
    assert np.all(np.diff(ones) < 0)
    assert np.all(np.diff(zeros) > 0)
    assert np.all(np.isfinite(ones + zeros))


def test_bce_rejects_non_binary_targets_and_bad_gamma():
    with pytest.raises(ParameterError):
        balanced_bce(np.array([[0.5]]), np.array([[0.5]]))
    with pytest.raises(ParameterError):
        BalancedBceConfig(gamma=1.0)
    with pytest.raises(ParameterError):
        BalancedBceConfig(out_lo=0.0)


def test_bce_gradient():
    o = RNG.uniform(0.05, 0.95, size=(2, 3, 3))
    t = (RNG.uniform(size=(2, 3, 3)) > 0.6).astype(float)
    grad_check_fn(lambda x: balanced_bce(x, t, BalancedBceConfig(gamma=0.98)), o, 1e-5)
    grad_check_fn(lambda x: balanced_bce(x, t, BalancedBceConfig(rescale_targets=False, rescale_outputs=False)), o, 1e-5)


# -- regularizer and classification ------------------------------------------------------------

def test_regularizer_examples():
    fam = rotation_family(1)
    assert invariance_regularizer(fam, [[1.0, 0.0]], [[2.0, 0.0]]).item() == 9.0
    planar = planar_family(3)
    e = RNG.normal(size=(4, planar.feature_dim))
    for _ in range(10):
        moved = apply(build_block_transform(planar, random_params(planar, RNG)), e)
        assert invariance_regularizer(planar, e, moved).item() <= 1e-9


def test_regularizer_symmetric_and_checked():
    fam = planar_family(2)
    a, b = RNG.normal(size=(3, 12)), RNG.normal(size=(3, 12))
    assert abs(invariance_regularizer(fam, a, b).item() - invariance_regularizer(fam, b, a).item()) <= 1e-12
    with pytest.raises(DimensionError):
        invariance_regularizer(fam, a, b[:, :10])


def test_regularizer_gradient():
    fam = planar_family(2)
    a, b = RNG.normal(size=(3, 12)), RNG.normal(size=(3, 12))
    grad_check_fn(lambda t: invariance_regularizer(fam, t, b), a, 1e-5)
    grad_check_fn(lambda t: invariance_regularizer(fam, a, t), b, 1e-5)


def test_combined_classification_examples():
    scores = RNG.normal(size=(5, 4))
    labels = np.array([0, 3, 1, 1, 2])
    recon = Tensor(0.37)
    assert combined_classification_loss(recon, scores, labels, weight=0).item() == 0.37
    uniform = combined_classification_loss(Tensor(0.0), np.zeros((5, 4)), labels, 1.0).item()
    assert abs(uniform - math.log(4)) <= 1e-12
    p = np.exp(scores - scores.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    ce = -np.mean(np.log(p[np.arange(5), labels]))
    assert abs(combined_classification_loss(recon, scores, labels).item() - (0.37 + 10 * ce)) <= 1e-12


def test_combined_classification_label_range():
    with pytest.raises(ParameterError):
        combined_classification_loss(Tensor(0.0), np.zeros((2, 3)), [0, 5])


def test_combined_classification_gradient():
    labels = np.array([1, 0, 2])
    grad_check_fn(lambda s: combined_classification_loss(Tensor(0.2), s, labels), RNG.normal(size=(3, 3)), 1e-5)


def test_reconstruction_loss_lookup():
    x, y = pair((11, 11))
    assert reconstruction_loss("l1")(x, y).item() == l1_loss(x, y).item()
    assert reconstruction_loss("face", 0.85)(x, y).item() == face_loss(x, y, 0.85).item()
    assert np.isfinite(reconstruction_loss("bce")(x, y).item())
    with pytest.raises(ParameterError):
        reconstruction_loss("l2")


# -- properties ---------------------------------------------------------------------------------

unit = st.floats(0, 1, allow_nan=False)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (11, 12), elements=unit), arrays(np.float64, (11, 12), elements=unit))
def test_ssim_symmetric_and_bounded(x, y):
    a, b = ssim(x, y).item(), ssim(y, x).item()
    assert abs(a - b) <= 1e-12
    assert -1.0 - 1e-12 <= a <= 1.0 + 1e-12


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (11, 11), elements=unit), arrays(np.float64, (11, 11), elements=unit), unit)
def test_face_loss_affine_in_alpha(x, y, alpha):
    f0, f1 = face_loss(x, y, 0.0).item(), face_loss(x, y, 1.0).item()
    assert abs(face_loss(x, y, alpha).item() - ((1 - alpha) * f0 + alpha * f1)) <= 1e-12
    assert f0 >= 0 and f1 >= 0


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 6), elements=unit), arrays(np.float64, (2, 6), elements=st.sampled_from([0.0, 1.0])))
def test_bce_finite_everywhere(o, t):
    assert np.isfinite(balanced_bce(o, t).item())
    unscaled = BalancedBceConfig(rescale_targets=False, rescale_outputs=False)
    value = balanced_bce(o, t, unscaled).item()
    assert np.isfinite(value) and value >= 0
