import pytest
from hypothesis import given, settings, strategies as st

from magnet_da.config import (
    ConfigFileError,
    NETWORK_FIELDS,
    TRAIN_FIELDS,
    build_configs,
    convert,
    load_config,
    parse_config,
    render_config,
    split_values,
)
from magnet_da.losses import KernelSpec
from magnet_da.network import NetworkConfig
from magnet_da.train import TrainConfig


def test_field_sets_are_disjoint():
    assert not set(TRAIN_FIELDS) & set(NETWORK_FIELDS)


def test_parse_types_and_comments():
    text = """
    # desk run
    base_lr = 0.01      # faster
    iterations = 0x10
    kernel = median-ladder
    transition_type = A
    growth_rate=4
    """
    values = parse_config(text)
    assert values == {
        "base_lr": 0.01,
        "iterations": 16,
        "kernel": KernelSpec.median_ladder(),
        "transition_type": "A",
        "growth_rate": 4,
    }
    assert isinstance(values["base_lr"], float) and isinstance(values["iterations"], int)


def test_fixed_kernel_value():
    assert convert("kernel", "0.5, 2") == KernelSpec.fixed(0.5, 2.0)


@pytest.mark.parametrize(
    "text",
    ["nonsense", "bogus = 1", "iterations = ten", "base_lr = fast", "kernel = wide", "iterations = 1\niterations = 2"],
)
def test_parse_errors(text):
    with pytest.raises(ConfigFileError):
        parse_config(text)


def test_error_names_line():
    with pytest.raises(ConfigFileError, match="line 2"):
        parse_config("iterations = 3\nno equals sign here")


def test_split_and_build():
    values = parse_config("lambda_mmd = 0.5\nstem_channels = 8\n")
    train, net = split_values(values)
    assert train == {"lambda_mmd": 0.5} and net == {"stem_channels": 8}
    tc, nc = build_configs(values, net_base=NetworkConfig(num_classes=3))
    assert tc.lambda_mmd == 0.5 and tc.gamma_entropy == 1.0
    assert nc.stem_channels == 8 and nc.num_classes == 3


@pytest.mark.parametrize("text", ["momentum = 1.0", "transition_type = C", "input_size = 20"])
def test_build_rejects_invalid_values(text):
    with pytest.raises(ConfigFileError):
        build_configs(parse_config(text))


def test_render_round_trip():
    tc = TrainConfig(base_lr=0.0125, kernel=KernelSpec.fixed(0.25, 4.0), weight_ramp=7.5, mmd_taps="final")
    nc = NetworkConfig(transition_type="A", stem_stride=2, tap_fc_dim=12)
    back = build_configs(parse_config(render_config(tc, nc)))
    assert back == (tc, nc)


@settings(max_examples=40, deadline=None)
@given(
    st.floats(1e-6, 1.0, allow_nan=False),
    st.floats(0.0, 0.99),
    st.integers(1, 10**6),
    st.sampled_from(["median", "median-ladder", "0.5", "1.0,3.0"]),
)
def test_render_round_trip_property(lr, momentum, iterations, kernel):
    tc = TrainConfig(base_lr=lr, momentum=momentum, iterations=iterations, kernel=KernelSpec.parse(kernel))
    nc = NetworkConfig()
    assert build_configs(parse_config(render_config(tc, nc))) == (tc, nc)


def test_load_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("batch_size = 8\n", encoding="utf-8")
    assert load_config(path) == {"batch_size": 8}
