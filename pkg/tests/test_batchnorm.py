"""BN statistics regimes: normalization identities, state discipline, taps."""

import numpy as np
import pytest

from bnshift.batchnorm import BNLayer, StatsMode, bn_forward, set_mode, tap_activations
from bnshift.model import GlobalLocalFusionNet, ModelConfig, PatchConfig
from bnshift.tensor import Tensor, no_grad
from helpers import check_gradients


def _layer(channels=1, **kw):
    return BNLayer(channels, **kw)


def test_hand_computed_normalization_of_three_values():
    # channel batch [1, 2, 3]: mean 2, biased variance 2/3
    layer = _layer(eps=1e-12)
    layer.mode = StatsMode.TT
    x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(3, 1))
    out = bn_forward(x, layer).data.ravel()
    assert np.allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_normalization_fixed_point():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 2, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    layer = _layer(2)
    layer.mode = StatsMode.TT
    out = bn_forward(Tensor(x), layer).data
    assert np.abs(out - x).max() < 1e-4


def test_tr_mode_is_a_frozen_affine_map():
    layer = _layer()
    layer.mode = StatsMode.TR
    layer.gamma.data[...] = 2.0
    layer.beta.data[...] = 1.0
    out = bn_forward(Tensor(np.array([[1.0]])), layer)
    assert np.allclose(out.data, [[3.0]], atol=1e-5)


def test_train_mode_output_mean_and_variance_identities():
    rng = np.random.default_rng(42)
    layer = _layer(3)
    gamma = rng.uniform(0.5, 2.0, size=3)
    beta = rng.normal(size=3)
    layer.gamma.data[...] = gamma
    layer.beta.data[...] = beta
    x = rng.normal(loc=1.5, scale=2.0, size=(16, 3, 5, 5))
    out = bn_forward(Tensor(x), layer).data
    mean = out.mean(axis=(0, 2, 3))
    var = out.var(axis=(0, 2, 3))
    sigma2 = x.var(axis=(0, 2, 3))
    assert np.abs(mean - beta).max() < 1e-6
    assert np.allclose(var, gamma**2 * sigma2 / (sigma2 + layer.eps), atol=1e-6)


def test_tt_full_batch_equals_train_normalization():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(12, 4, 3, 3))
    layer = _layer(4)
    layer.mode = StatsMode.TT
    out_tt = bn_forward(Tensor(x), layer).data
    layer.mode = StatsMode.TRAIN
    out_train = bn_forward(Tensor(x), layer).data
    assert np.abs(out_tt - out_train).max() < 1e-10


def test_tr_and_tt_never_mutate_running_stats():
    rng = np.random.default_rng(2)
    layer = _layer(2)
    layer.running_mean = rng.normal(size=2)
    layer.running_var = rng.uniform(0.5, 2.0, size=2)
    before = (layer.running_mean.tobytes(), layer.running_var.tobytes())
    for mode in (StatsMode.TR, StatsMode.TT):
        layer.mode = mode
        bn_forward(Tensor(rng.normal(size=(6, 2, 3, 3))), layer)
    assert (layer.running_mean.tobytes(), layer.running_var.tobytes()) == before


def test_train_mode_updates_running_stats_with_unbiased_variance():
    layer = _layer(1, momentum=0.5)
    x = np.array([0.0, 2.0]).reshape(2, 1)
    bn_forward(Tensor(x), layer)
    # batch mean 1, biased var 1, unbiased var 2
    assert np.allclose(layer.running_mean, 0.5 * 0.0 + 0.5 * 1.0)
    assert np.allclose(layer.running_var, 0.5 * 1.0 + 0.5 * 2.0)


def test_running_mean_converges_within_three_standard_errors():
    rng = np.random.default_rng(7)
    layer = _layer(4)
    true_mean = np.array([0.5, -1.0, 2.0, 0.0])
    sigma = 1.5
    n_batch = 8 * 4 * 4
    for _ in range(500):
        x = rng.normal(true_mean[None, :, None, None], sigma, size=(8, 4, 4, 4))
        bn_forward(Tensor(x), layer)
    # EWMA of i.i.d. batch means: var = momentum / (2 - momentum) * sigma^2 / n
    se = sigma * np.sqrt(layer.momentum / (2.0 - layer.momentum) / n_batch)
    assert np.abs(layer.running_mean - true_mean).max() < 3.0 * se


def test_bn_gradients_match_finite_differences_in_both_stat_modes():
    rng = np.random.default_rng(5)
    for mode in (StatsMode.TT, StatsMode.TR):
        layer = _layer(3)
        layer.running_mean = rng.normal(size=3)
        layer.running_var = rng.uniform(0.5, 2.0, size=3)
        layer.mode = mode
        x = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        proj = Tensor(rng.normal(size=(4, 3, 3, 3)))
        check_gradients(
            lambda: (bn_forward(x, layer) * proj).sum(),
            [x, layer.gamma, layer.beta],
        )


def test_batch_too_small_for_batch_stats():
    layer = _layer()
    layer.mode = StatsMode.TT
    with pytest.raises(ValueError):
        bn_forward(Tensor(np.array([[1.0]])), layer)
    layer.mode = StatsMode.TR
    bn_forward(Tensor(np.array([[1.0]])), layer)  # TR accepts N = 1


def test_constructor_validation():
    with pytest.raises(ValueError):
        BNLayer(2, eps=0.0)
    with pytest.raises(ValueError):
        BNLayer(2, eps=-1e-5)
    with pytest.raises(ValueError):
        BNLayer(2, momentum=1.0)


# -- model-level mode switching and taps -----------------------------------------


@pytest.fixture(scope="module")
def tiny_model():
    cfg = ModelConfig(image_size=16, channels=4, local_channels=(4, 4),
                      patch=PatchConfig(1, 4), domain_widths=(8, 8, 8))
    return GlobalLocalFusionNet(cfg, rng=np.random.default_rng(0))


def _batch(n=4, size=16, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 1, size, size))


def test_set_mode_switches_all_layers_and_validates(tiny_model):
    set_mode(tiny_model, StatsMode.TT, tt_batch_size=8)
    assert all(l.mode is StatsMode.TT for _, l in tiny_model.bn_layers())
    assert tiny_model.tt_batch_size == 8
    with pytest.raises(ValueError):
        set_mode(tiny_model, StatsMode.TT)
    set_mode(tiny_model, "tr")
    assert all(l.mode is StatsMode.TR for _, l in tiny_model.bn_layers())


def test_tap_counts_order_and_purity(tiny_model):
    set_mode(tiny_model, StatsMode.TR)
    batch = _batch()
    trace1 = tap_activations(tiny_model, batch)
    trace2 = tap_activations(tiny_model, batch)
    names = [name for name, _ in tiny_model.bn_layers()]
    assert trace1.layer_names() == names
    assert [e.depth for e in trace1.entries] == list(range(len(names)))
    for a, b in zip(trace1.entries, trace2.entries):
        assert a.values.tobytes() == b.values.tobytes()


def test_tap_shapes_match_plain_forward(tiny_model):
    set_mode(tiny_model, StatsMode.TR)
    batch = _batch(seed=3)
    trace = tap_activations(tiny_model, batch)
    with no_grad():
        out = tiny_model.forward(Tensor(batch))
    stem = trace.entries[0].values
    assert stem.shape == (4, 4, 8, 8)  # stride-2 stem on 16x16
    assert trace.entries[-1].values.shape[0] == 4 * tiny_model.cfg.patch.count
    assert out.saliency.shape[0] == 4


def test_tap_does_not_perturb_train_state(tiny_model):
    set_mode(tiny_model, StatsMode.TRAIN)
    before = {n: (l.running_mean.tobytes(), l.running_var.tobytes())
              for n, l in tiny_model.bn_layers()}
    tap_activations(tiny_model, _batch(seed=9))
    after = {n: (l.running_mean.tobytes(), l.running_var.tobytes())
             for n, l in tiny_model.bn_layers()}
    assert before == after
    set_mode(tiny_model, StatsMode.TR)
