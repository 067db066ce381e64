import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from migan import losses
from migan.errors import DomainError, ModeError, ShapeMismatchError, StructureMismatchError
from migan.features import FeatureSet

from oracles import bce_loop, content_loop, gram_loop, l1_loop, style_loop, tv_loop

T = lambda a: torch.tensor(np.asarray(a, dtype=np.float64))


def test_l1_closed_form():
    assert float(losses.l1_deviation(T([1.0, -1.0]), T([0.0, 0.0]))) == 1.0
    assert float(losses.l1_deviation(T([[0.5]]), T([[0.5]]))) == 0.0


def test_adv_losses_closed_form():
    assert math.isclose(float(losses.generator_adv_loss(T([0.5, 0.5]))), math.log(2), rel_tol=1e-12)
    assert math.isclose(float(losses.discriminator_loss(T([0.5]), T([0.5]))), 2 * math.log(2),
                        rel_tol=1e-12)


def test_log_clipping_keeps_losses_finite():
    assert math.isfinite(float(losses.generator_adv_loss(T([0.0]))))
    assert math.isfinite(float(losses.discriminator_loss(T([0.0]), T([1.0]))))
    assert math.isclose(float(losses.seg_bce(T([1.0]), T([0.0]))), -math.log(losses.EPS), rel_tol=1e-9)


def test_bce_closed_form():
    assert math.isclose(float(losses.seg_bce(T([1, 0]), T([0.5, 0.5]))), math.log(2), rel_tol=1e-12)


@pytest.mark.parametrize("bad", [-0.1, 1.1, float("nan")])
def test_domain_errors(bad):
    with pytest.raises(DomainError):
        losses.generator_adv_loss(T([bad]))
    with pytest.raises(DomainError):
        losses.seg_bce(T([1.0]), T([bad]))


def test_shape_errors():
    with pytest.raises(ShapeMismatchError):
        losses.l1_deviation(T(np.zeros((2, 2))), T(np.zeros((2, 3))))
    with pytest.raises(ShapeMismatchError):
        losses.seg_bce(T(np.zeros(3)), T(np.full(4, 0.5)))
    with pytest.raises(ShapeMismatchError):
        losses.tv_loss(T(np.zeros((4, 4))))


def test_oracles_match(rng):
    x, y = rng.normal(size=(3, 5, 6)), rng.normal(size=(3, 5, 6))
    assert abs(float(losses.l1_deviation(T(x), T(y))) - l1_loop(x, y)) < 1e-12
    lab, p = rng.integers(0, 2, (5, 6)), rng.uniform(size=(5, 6))
    assert abs(float(losses.seg_bce(T(lab), T(p))) - bce_loop(lab, p)) < 1e-12
    assert np.abs(losses.gram(T(x)).numpy() - gram_loop(x)).max() < 1e-12
    assert abs(float(losses.tv_loss(T(x))) - tv_loop(x)) < 1e-12


def _features(rng, keys, c=3, size=6):
    return {k: rng.normal(size=(c, size >> (k[0] - 1), size >> (k[0] - 1))) for k in keys}


def test_style_and_content_oracles(rng):
    keys = [(1, 1), (2, 1), (3, 1)]
    fs, fg = _features(rng, keys, size=8), _features(rng, keys, size=8)
    w = losses.LossWeights(block_weights=(0.5, 0.3, 0.2, 0, 0))
    got = losses.style_loss({k: T(v) for k, v in fs.items()}, {k: T(v) for k, v in fg.items()}, w)
    assert abs(float(got) - style_loop(fs, fg, w.block_weights)) < 1e-12
    got = losses.content_loss({k: T(v) for k, v in fs.items()}, {k: T(v) for k, v in fg.items()})
    assert abs(float(got) - content_loop(fs, fg)) < 1e-12


def test_style_uses_featureset_keys(rng):
    keys = [(1, 1), (2, 1)]
    fs = {k: T(v) for k, v in _features(rng, keys).items()}
    fg = {k: T(v) for k, v in _features(rng, keys).items()}
    only_first = losses.style_loss(FeatureSet(fs, "x", style_keys=((1, 1),)),
                                   FeatureSet(fg, "x", style_keys=((1, 1),)))
    explicit = losses.style_loss(fs, fg, keys=[(1, 1)])
    assert float(only_first) == float(explicit)


def test_structure_mismatch(rng):
    fs = {(1, 1): T(rng.normal(size=(3, 4, 4)))}
    fg = {(1, 1): T(rng.normal(size=(4, 4, 4))), (2, 1): T(rng.normal(size=(3, 2, 2)))}
    with pytest.raises(StructureMismatchError):
        losses.style_loss(fs, fg)
    with pytest.raises(StructureMismatchError):
        losses.content_loss(fs, fg, keys=[(1, 1)])


def test_gram_is_symmetric_psd(rng):
    g = losses.gram(T(rng.normal(size=(5, 7, 7)))).numpy()
    assert np.allclose(g, g.T)
    assert np.linalg.eigvalsh(g).min() > -1e-9


def test_tv_constant_shift_invariance(rng):
    x = rng.normal(size=(3, 8, 8))
    assert abs(float(losses.tv_loss(T(x))) - float(losses.tv_loss(T(x + 3.7)))) < 1e-10
    assert float(losses.tv_loss(T(np.full((3, 8, 8), 2.0)))) == 0.0


def test_batch_permutation_invariance(rng):
    x, y = rng.normal(size=(4, 3, 6, 6)), rng.normal(size=(4, 3, 6, 6))
    perm = rng.permutation(4)
    for fn in (losses.l1_deviation, lambda a, b: losses.tv_loss(a) + losses.tv_loss(b)):
        a, b = float(fn(T(x), T(y))), float(fn(T(x[perm]), T(y[perm])))
        assert abs(a - b) < 1e-12
    fs, fg = {(1, 1): T(x)}, {(1, 1): T(y)}
    fsp, fgp = {(1, 1): T(x[perm])}, {(1, 1): T(y[perm])}
    assert abs(float(losses.style_loss(fs, fg)) - float(losses.style_loss(fsp, fgp))) < 1e-9


def test_batched_style_is_mean_of_items(rng):
    x, y = rng.normal(size=(3, 2, 4, 4)), rng.normal(size=(3, 2, 4, 4))
    batched = float(losses.style_loss({(1, 1): T(x)}, {(1, 1): T(y)}))
    single = np.mean([float(losses.style_loss({(1, 1): T(a)}, {(1, 1): T(b)})) for a, b in zip(x, y)])
    assert abs(batched - single) < 1e-9


def test_generator_objective_modes():
    d = T([0.5])
    adv = math.log(2)
    assert math.isclose(float(losses.generator_objective("synthesis_l1", d_fake=d, l1=T(0.1))),
                        adv + 1.0, rel_tol=1e-12)
    assert math.isclose(float(losses.generator_objective("segmentation", d_fake=d, bce=T(0.2))),
                        adv + 2.0, rel_tol=1e-12)
    assert math.isclose(float(losses.generator_objective("synthesis_style", d_fake=d, style=T(3.0),
                                                         seg=T(0.1))), adv + 4.0, rel_tol=1e-12)


def test_generator_objective_rejects_bad_parts():
    with pytest.raises(ModeError):
        losses.generator_objective("pix2pix", d_fake=T([0.5]))
    with pytest.raises(ModeError):
        losses.generator_objective("synthesis_l1", d_fake=T([0.5]), bce=T(0.1))
    with pytest.raises(ModeError):
        losses.generator_objective("segmentation", d_fake=T([0.5]))


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        losses.LossWeights(lambda_dev=-1)


unit = arrays(np.float64, (4, 4), elements=st.floats(0, 1))
real = arrays(np.float64, (2, 4, 4), elements=st.floats(-10, 10))


@settings(max_examples=40, deadline=None)
@given(unit, unit)
def test_bce_nonnegative_property(y, p):
    y = (y > 0.5).astype(float)
    assert float(losses.seg_bce(T(y), T(p))) >= 0


@settings(max_examples=40, deadline=None)
@given(real, real)
def test_l1_metric_properties(a, b):
    ab = float(losses.l1_deviation(T(a), T(b)))
    assert ab >= 0 and ab == float(losses.l1_deviation(T(b), T(a)))
    assert float(losses.l1_deviation(T(a), T(a))) == 0


@settings(max_examples=40, deadline=None)
@given(real)
def test_tv_nonnegative_property(a):
    assert float(losses.tv_loss(T(a))) >= 0


@settings(max_examples=30, deadline=None)
@given(real, real)
def test_style_zero_iff_equal_grams(a, b):
    assert float(losses.style_loss({(1, 1): T(a)}, {(1, 1): T(a)})) == 0
    assert float(losses.style_loss({(1, 1): T(a)}, {(1, 1): T(b)})) >= 0
