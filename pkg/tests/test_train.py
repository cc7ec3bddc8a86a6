import dataclasses
import math

import numpy as np
import pytest

from magnet_da import autodiff as ad
from magnet_da.autodiff import ContractError, Parameter, Tensor
from magnet_da.data import Dataset, DomainPair, generate_shapes
from magnet_da.losses import KernelSpec
from magnet_da.network import MagnetModel, NetworkConfig, magnet_forward
from magnet_da.train import (
    METHODS,
    TASKS,
    TaskSpec,
    TrainConfig,
    _EpochSampler,
    adaptation_scale,
    evaluate,
    lr_schedule,
    mean_prediction_entropy,
    nesterov_step,
    run_experiment,
    train,
    train_step,
)

TINY_TASK = TaskSpec("tiny", "cad", "photo", classes=3, n_source=30, n_target=24, image_size=16)
TINY_NET = NetworkConfig(input_size=16, num_classes=3, num_blocks=2, layers_per_block=1, growth_rate=2, stem_channels=4)


@pytest.fixture(scope="module")
def tiny_pair():
    return TINY_TASK.build()


def tiny_cfg(**kw):
    base = dict(iterations=6, batch_size=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- schedule


def test_lr_schedule_examples():
    assert lr_schedule(0.003, 0.0) == 0.003
    assert lr_schedule(0.003, 1.0) == pytest.approx(4.967e-4, abs=5e-8)
    assert lr_schedule(0.003, 1.0) == pytest.approx(0.003 / 11**0.75, rel=1e-15)


def test_lr_schedule_monotone_and_bounded():
    grid = [lr_schedule(0.003, p / 10) for p in range(11)]
    assert all(a >= b for a, b in zip(grid, grid[1:]))
    assert all(0 < v <= 0.003 for v in grid)


def test_lr_schedule_range_checked():
    for p in (-0.1, 1.1):
        with pytest.raises(ValueError):
            lr_schedule(0.003, p)


def test_adaptation_scale():
    assert adaptation_scale(TrainConfig(), 0.3) == 1.0
    cfg = TrainConfig(weight_ramp=10.0)
    assert adaptation_scale(cfg, 0.0) == 0.0
    assert adaptation_scale(cfg, 1.0) == pytest.approx(2 / (1 + math.exp(-10)) - 1)
    vals = [adaptation_scale(cfg, p / 20) for p in range(21)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize(
    "kw",
    [dict(momentum=1.0), dict(momentum=-0.1), dict(base_lr=0.0), dict(iterations=0), dict(batch_size=0),
     dict(weight_ramp=-1.0), dict(mmd_taps="some")],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_snapshot_describes_kernel():
    snap = TrainConfig(kernel=KernelSpec.fixed(1.0, 2.0)).snapshot()
    assert isinstance(snap["kernel"], str)
    assert snap["base_lr"] == 0.003 and snap["batch_size"] == 32


# ---------------------------------------------------------------- optimiser


def _param(value, name="p", mult=1.0):
    return Parameter(name, Tensor(np.array(value, dtype=float), requires_grad=True), lr_multiplier=mult)


def nesterov_scalar(p, grad_fn, lr, m, steps, wd=0.0):
    """Plain-float reference of the documented update."""
    v = [0.0] * len(p)
    p = list(p)
    for _ in range(steps):
        g = grad_fn(p)
        for i in range(len(p)):
            d = g[i] + wd * p[i]
            v[i] = m * v[i] - lr * d
            p[i] = p[i] + m * v[i] - lr * d
    return p


def test_nesterov_quadratic_bowl():
    p = _param([1.0, -2.0, 0.5])
    vel = {}
    for _ in range(200):
        p.tensor.grad = p.data.copy()  # ∇ ½‖p‖²
        nesterov_step([p], vel, lr=0.1, momentum=0.9)
    assert np.linalg.norm(p.data) < 1e-6
    ref = nesterov_scalar([1.0, -2.0, 0.5], lambda q: q, 0.1, 0.9, 200)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12, atol=1e-300)


def test_nesterov_matches_scalar_reference_with_decay():
    rng = np.random.default_rng(0)
    a = rng.normal(size=4)
    p = _param(rng.normal(size=4))
    start = p.data.tolist()
    vel = {}
    for _ in range(25):
        p.tensor.grad = a * p.data + 1.0
        nesterov_step([p], vel, lr=0.05, momentum=0.8, weight_decay=0.01)
    ref = nesterov_scalar(start, lambda q: [a[i] * q[i] + 1.0 for i in range(4)], 0.05, 0.8, 25, wd=0.01)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_nesterov_without_momentum_is_gradient_descent():
    p = _param([3.0, 4.0])
    p.tensor.grad = np.array([1.0, -2.0])
    nesterov_step([p], {}, lr=0.5, momentum=0.0)
    np.testing.assert_array_equal(p.data, [2.5, 5.0])


def test_nesterov_zero_gradient_fixed_point():
    p = _param([3.0, 4.0])
    p.tensor.grad = np.zeros(2)
    vel = {"p": np.zeros(2)}
    nesterov_step([p], vel, lr=0.5, momentum=0.9)
    np.testing.assert_array_equal(p.data, [3.0, 4.0])


def test_nesterov_lr_multiplier():
    a, b = _param([1.0], "a"), _param([1.0], "b", mult=10.0)
    for q in (a, b):
        q.tensor.grad = np.array([1.0])
    nesterov_step([a, b], {}, lr=0.01, momentum=0.0)
    assert a.data[0] == pytest.approx(0.99) and b.data[0] == pytest.approx(0.9)


def test_nesterov_missing_gradient():
    with pytest.raises(ContractError):
        nesterov_step([_param([1.0])], {}, lr=0.1, momentum=0.9)


# ---------------------------------------------------------------- sampling


def test_epoch_sampler_covers_each_epoch():
    s = _EpochSampler(10, np.random.default_rng(0))
    draws = np.concatenate([s.next(4) for _ in range(5)])
    assert sorted(draws[:10].tolist()) == list(range(10))
    assert sorted(draws[10:20].tolist()) == list(range(10))


# ---------------------------------------------------------------- training


def test_train_step_decomposition_and_gradients(tiny_pair):
    model = MagnetModel(TINY_NET, 0)
    cfg = tiny_cfg()
    src = tiny_pair.source
    loss, rep = train_step(model, src.images[:4], src.labels[:4], tiny_pair.target.images[:4], cfg)
    expect = rep.source_nll + rep.gamma_entropy * rep.target_entropy + rep.lambda_mmd * sum(rep.mmd_per_tap)
    assert loss.item() == pytest.approx(expect, rel=1e-12)
    assert len(rep.mmd_per_tap) == TINY_NET.tap_count
    assert all(p.grad is not None and np.isfinite(p.grad).all() for p in model.parameters())


def test_train_step_scale_multiplies_weights(tiny_pair):
    model = MagnetModel(TINY_NET, 0)
    src = tiny_pair.source
    _, rep = train_step(model, src.images[:4], src.labels[:4], tiny_pair.target.images[:4], tiny_cfg(), scale=0.25)
    assert rep.lambda_mmd == 0.25 and rep.gamma_entropy == 0.25


def test_source_only_fills_zero_gradients(tiny_pair):
    model = MagnetModel(TINY_NET, 0)
    cfg = tiny_cfg(lambda_mmd=0.0, gamma_entropy=0.0)
    src = tiny_pair.source
    train_step(model, src.images[:4], src.labels[:4], tiny_pair.target.images[:4], cfg)
    assert not model.params["residual.fc1.weight"].grad.any()


def test_single_tap_mode(tiny_pair):
    model = MagnetModel(TINY_NET, 0)
    src = tiny_pair.source
    _, rep = train_step(model, src.images[:4], src.labels[:4], tiny_pair.target.images[:4], tiny_cfg(mmd_taps="final"))
    assert len(rep.mmd_per_tap) == 1


def _state_bytes(model):
    return {k: v.tobytes() for k, v in model.state_arrays().items()}


def test_train_is_deterministic(tiny_pair):
    runs = []
    for _ in range(2):
        model = MagnetModel(TINY_NET, 3)
        res = train(model, tiny_pair, tiny_cfg(seed=3))
        runs.append((_state_bytes(model), res))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1].final_target_acc == runs[1][1].final_target_acc
    model = MagnetModel(TINY_NET, 3)
    train(model, tiny_pair, tiny_cfg(seed=4))
    assert _state_bytes(model) != runs[0][0]


def test_train_result_contract(tiny_pair):
    model = MagnetModel(TINY_NET, 0)
    res = train(model, tiny_pair, tiny_cfg(iterations=7, log_every=3))
    assert res.iterations_logged == [0, 3, 6]
    assert len(res.reports) == len(res.lrs) == 3
    assert res.lrs[0] == 0.003
    for r in res.reports:
        total = r.source_nll + r.gamma_entropy * r.target_entropy + r.lambda_mmd * sum(r.mmd_per_tap)
        assert r.total == pytest.approx(total, rel=1e-12)
    assert 0 <= res.final_target_acc <= 1 and 0 <= res.source_acc <= 1
    assert res.best_target_acc >= res.final_target_acc
    assert res.config["iterations"] == 7
    assert res.mmd_trace().shape == (3,)


def test_train_rejects_class_mismatch(tiny_pair):
    model = MagnetModel(dataclasses.replace(TINY_NET, num_classes=4), 0)
    with pytest.raises(ValueError):
        train(model, tiny_pair, tiny_cfg())


def test_train_reads_target_labels_only_after_the_loop(tiny_pair):
    steps = []
    reads = []

    class Watched(DomainPair):
        def target_for_evaluation(self):
            reads.append(len(steps))
            return super().target_for_evaluation()

    watched = Watched(tiny_pair.source, tiny_pair.target_for_evaluation())
    train(MagnetModel(TINY_NET, 0), watched, tiny_cfg(iterations=4), progress=lambda it, rep: steps.append(it))
    assert len(steps) == 4
    assert reads and all(r == 4 for r in reads)


def test_train_unlabelled_target_gives_no_accuracy(tiny_pair):
    pair = DomainPair(tiny_pair.source, tiny_pair.target)
    res = train(MagnetModel(TINY_NET, 0), pair, tiny_cfg(iterations=2))
    assert res.final_target_acc is None


def test_training_reduces_source_loss(tiny_pair):
    model = MagnetModel(TINY_NET, 0)
    res = train(model, tiny_pair, tiny_cfg(iterations=60, lambda_mmd=0.0, gamma_entropy=0.0, base_lr=0.03))
    first = np.mean([r.source_nll for r in res.reports[:10]])
    last = np.mean([r.source_nll for r in res.reports[-10:]])
    assert last < first


# ---------------------------------------------------------------- evaluation


def test_evaluate_chance_level_untrained():
    ds = generate_shapes("photo", 4, 1000, 16, seed=0)
    net = NetworkConfig(input_size=16, num_classes=4, num_blocks=2, layers_per_block=1, growth_rate=2, stem_channels=4)
    accs = [evaluate(MagnetModel(net, s), ds) for s in range(3)]
    assert all(abs(a - 0.25) < 0.1 for a in accs)


def test_evaluate_idempotent_and_matches_fs_at_init(tiny_pair):
    model = MagnetModel(TINY_NET, 1)
    magnet_forward(model, tiny_pair.source.images[:8])  # non-trivial running stats
    src = tiny_pair.source
    a = evaluate(model, src)
    assert a == evaluate(model, src)
    fs = magnet_forward(model, src.images, mode="eval").fs_logits.data
    assert a == float(np.mean(fs.argmax(1) == src.labels))


def test_evaluate_ties_go_to_lowest_index():
    net = NetworkConfig(input_size=16, num_classes=3, num_blocks=1, layers_per_block=1, growth_rate=2, stem_channels=2)
    model = MagnetModel(net, 0)
    for p in model.parameters():
        if p.name.startswith("source_head"):
            p.data[...] = 0.0
    ds = Dataset(np.zeros((3, 1, 16, 16)), [0, 1, 2], ["a", "b", "c"])
    assert evaluate(model, ds) == pytest.approx(1 / 3)


def test_evaluate_needs_labels(tiny_pair):
    with pytest.raises(ContractError):
        evaluate(MagnetModel(TINY_NET, 0), tiny_pair.target)


def test_mean_prediction_entropy_bounds(tiny_pair):
    h = mean_prediction_entropy(MagnetModel(TINY_NET, 0), tiny_pair.target.images)
    assert 0 <= h <= math.log(3) + 1e-12


# ---------------------------------------------------------------- experiments


def test_tasks_registry():
    assert set(TASKS) == {"photo70-photo30", "cad-photo", "sketch-photo"}
    assert TASKS["cad-photo"].n_source == 1200 and TASKS["cad-photo"].image_size == 32
    assert TASKS["photo70-photo30"].source_domain == TASKS["photo70-photo30"].target_domain


def test_same_domain_task_is_split():
    pair = TaskSpec("t", "photo", "photo", classes=3, n_source=21, n_target=9, image_size=16).build()
    assert len(pair.source) == 21 and len(pair.target) == 9


def test_run_experiment_bookkeeping():
    cfg = tiny_cfg(iterations=3)
    methods = ["magnet", "source-only"]
    res = run_experiment([TINY_TASK], cfg, TINY_NET, repetitions=1, methods=methods)
    assert len(res.rows) == 2
    aggs = res.aggregates()
    assert len(aggs) == len(methods)
    assert all(a.std == 0.0 and a.n == 1 for a in aggs)
    assert {(r.method, r.seed) for r in res.rows} == {("magnet", 0), ("source-only", 0)}


def test_run_experiment_seeds_and_std():
    seen = []
    res = run_experiment([TINY_TASK], tiny_cfg(iterations=2, seed=5), TINY_NET, repetitions=2,
                         methods=["no-mmd"], on_run=seen.append)
    assert [r.seed for r in res.rows] == [5, 6] and len(seen) == 2
    accs = res.target_accs("tiny", "no-mmd")
    assert res.aggregates()[0].std == pytest.approx(float(np.std(accs, ddof=1)))


def test_run_experiment_errors():
    with pytest.raises(ValueError):
        run_experiment([TINY_TASK], tiny_cfg(), TINY_NET, repetitions=0)
    with pytest.raises(ValueError):
        run_experiment([TINY_TASK], tiny_cfg(), TINY_NET, methods=["bogus"])


def test_methods_registry():
    assert METHODS["source-only"] == {"lambda_mmd": 0.0, "gamma_entropy": 0.0}
    assert set(METHODS) == {"magnet", "source-only", "no-entropy", "no-mmd", "single-tap"}
