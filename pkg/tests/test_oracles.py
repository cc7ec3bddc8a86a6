import math

import numpy as np
import pytest

from magnet_da import autodiff as ad
from magnet_da.autodiff import Tensor
from magnet_da.losses import KernelSpec, entropy, median_bandwidth, mmd_biased, nll_source
from magnet_da.oracles import (
    COMPONENTS,
    LOSS_TOL,
    MODEL_TOL,
    corrupt_gradient,
    entropy_reference,
    median_bandwidth_reference,
    micro_model,
    mmd_reference,
    nll_reference,
    random_mmd_instance,
    run_gradcheck,
    run_mmdcheck,
)


def test_reference_closed_forms():
    assert mmd_reference([[0.0]], [[2.0]], 1.0) == pytest.approx(2 - 2 * math.exp(-2), abs=1e-15)
    assert entropy_reference([[0.25] * 4]) == pytest.approx(math.log(4), abs=1e-15)
    assert nll_reference([[0.0] * 10], [3]) == pytest.approx(math.log(10), abs=1e-15)


def test_median_reference_matches_implementation():
    rng = np.random.default_rng(0)
    for _ in range(20):
        zs, zt = random_mmd_instance(rng, max_n=12, max_d=5)
        assert median_bandwidth(zs, zt) == pytest.approx(median_bandwidth_reference(zs, zt), rel=1e-12)


def test_scalar_references_agree_with_tensor_losses():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, 5)
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    assert nll_source(Tensor(logits), labels).item() == pytest.approx(nll_reference(logits, labels), abs=1e-12)
    assert entropy(Tensor(p)).item() == pytest.approx(entropy_reference(p), abs=1e-12)
    zs, zt = rng.normal(size=(6, 3)), rng.normal(size=(4, 3)) + 1
    got = mmd_biased(Tensor(zs), Tensor(zt), KernelSpec.fixed(0.7)).item()
    assert got == pytest.approx(mmd_reference(zs, zt, 0.7), abs=1e-12)


def test_random_instances_within_bounds():
    rng = np.random.default_rng(2)
    for _ in range(50):
        zs, zt = random_mmd_instance(rng, max_n=64, max_d=16)
        assert 1 <= len(zs) <= 64 and 1 <= len(zt) <= 64
        assert zs.shape[1] == zt.shape[1] <= 16


def test_mmdcheck_passes_and_summarises():
    res = run_mmdcheck(instances=20)
    assert res.instances == 20 and res.passed
    assert res.max_dev < 1e-10
    assert res.summary().endswith("< 1e-10 PASS")


def test_mmdcheck_tiny_samples():
    assert run_mmdcheck(instances=10, max_n=1, max_d=1).passed


def test_corrupt_gradient_skews_backward_only():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = corrupt_gradient(x, factor=1.5)
    assert np.array_equal(y.data, x.data)
    ad.backward(y.sum())
    np.testing.assert_array_equal(x.grad, [1.5, 1.5])


def test_micro_model_shape():
    m = micro_model("A")
    cfg = m.config
    assert (cfg.num_blocks, cfg.growth_rate, cfg.input_size) == (1, 4, 8)
    assert m["residual.fc2.weight"].data.any()


def test_component_registry():
    assert {"linear", "conv", "bn", "relu", "pool", "concat", "mmd", "entropy", "nll", "total", "model", "model-a"} == set(COMPONENTS)
    assert MODEL_TOL == 1e-4 and LOSS_TOL == 1e-5


@pytest.mark.parametrize("name", ["linear", "conv", "bn", "pool", "concat", "mmd", "entropy", "nll", "total"])
def test_component_passes(name):
    suite = run_gradcheck([name])
    assert suite.passed, suite.lines()


@pytest.mark.parametrize("name", ["linear", "mmd", "entropy", "nll"])
def test_corruption_is_detected(name):
    suite = run_gradcheck([name], corrupt=name)
    assert not suite.passed
    assert suite.lines()[0].endswith("FAIL")


def test_unknown_component():
    with pytest.raises(KeyError):
        run_gradcheck(["attention"])
