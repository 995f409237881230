import numpy as np
import numpy.testing as npt
import pytest

from ymwml.errors import FormatError, ShapeError
from ymwml.model import (
    Model,
    ModelConfig,
    ParamBuilder,
    ParameterStore,
    build_model,
    load_checkpoint,
    norm_groups,
    predict_classes,
    save_checkpoint,
    shape_report,
)
from ymwml.tensor import Rng, Tensor


def _thin(input_size=32):
    return ModelConfig(width=0.125, input_size=input_size)


# --- configuration -----------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ShapeError):
        ModelConfig(input_size=100).validate()  # not a multiple of 32
    with pytest.raises(ShapeError):
        ModelConfig(width=0.0).validate()
    with pytest.raises(ShapeError):
        ModelConfig(width=1.5).validate()
    with pytest.raises(ShapeError):
        ModelConfig(num_classes=1).validate()


def test_channel_scaling_rounds_to_group_multiples():
    cfg = ModelConfig(width=0.25)
    assert cfg.channels(128) == 32
    assert cfg.channels(256) == 64
    assert cfg.channels(512) == 128
    thin = ModelConfig(width=0.125)
    # never below one full group
    assert thin.channels(32) == 8
    assert thin.channels(64) == 8


def test_norm_groups_is_largest_divisor_up_to_limit():
    assert norm_groups(64) == 8
    assert norm_groups(8) == 8
    assert norm_groups(12) == 6
    assert norm_groups(7) == 7
    assert norm_groups(13) == 1  # prime above the limit falls back to 1


# --- shape contract ----------------------------------------------------------------


def test_shape_report_full_width():
    rows = {name: (size, ch) for name, size, ch in shape_report(ModelConfig())}
    assert rows["head/in_t3"] == (32, 128)
    assert rows["head/in_p4"] == (16, 256)
    assert rows["head/in_p5"] == (8, 512)
    assert rows["head/out"] == (256, 4)


def test_shape_report_quarter_width():
    rows = {name: (size, ch) for name, size, ch in shape_report(ModelConfig(width=0.25))}
    assert rows["head/in_t3"] == (32, 32)
    assert rows["head/in_p4"] == (16, 64)
    assert rows["head/in_p5"] == (8, 128)
    assert rows["head/out"] == (256, 4)


def test_forward_output_shape_and_finiteness():
    model = build_model(_thin(), Rng(5))
    x = Tensor(Rng(6).uniforms(2 * 32 * 32).reshape(2, 1, 32, 32))
    out = model.forward(x)
    assert out.shape == (2, 4, 32, 32)
    assert out.is_finite()


def test_predict_classes_shape_and_range():
    model = build_model(_thin(), Rng(5))
    images = Rng(7).uniforms(3 * 32 * 32).reshape(3, 1, 32, 32)
    pred = predict_classes(model, images)
    assert pred.shape == (3, 32, 32)
    assert pred.dtype.kind == "i"
    assert set(np.unique(pred)) <= {0, 1, 2, 3}


# --- initialization ------------------------------------------------------------------


def test_build_is_deterministic_for_a_seed():
    m1 = build_model(_thin(), Rng(42))
    m2 = build_model(_thin(), Rng(42))
    assert m1.params.names() == m2.params.names()
    for name, p in m1.params.items():
        npt.assert_array_equal(p.data, m2.params[name].data)


def test_different_seeds_differ():
    m1 = build_model(_thin(), Rng(1))
    m2 = build_model(_thin(), Rng(2))
    assert any(
        not np.array_equal(p.data, m2.params[name].data) for name, p in m1.params.items()
    )


def test_every_parameter_requires_grad_and_is_finite():
    model = build_model(_thin(), Rng(3))
    for name, p in model.params.items():
        assert p.requires_grad, name
        assert p.is_finite(), name


def test_parameter_store_rejects_duplicates():
    store = ParameterStore()
    store.add("a", Tensor([1.0]))
    with pytest.raises(ShapeError, match="duplicate"):
        store.add("a", Tensor([2.0]))


def test_c3k2_parameter_count_closed_form():
    # 1x1 pre (C+1)*C, two bottlenecks on C/2, 1x1 post over 1.5*C channels:
    # for C_in = C_out = 8: 72 + 2*312 + 104 = 800
    store = ParameterStore()
    builder = ParamBuilder(store, Rng(0))
    builder.c3k2("blk", 8, 8)
    assert store.total_parameters() == 800


# --- checkpoint serialization ---------------------------------------------------------


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    model = build_model(_thin(), Rng(11))
    path = tmp_path / "model.ckpt"
    save_checkpoint(model.params, path)
    loaded = load_checkpoint(path)
    assert loaded.names() == model.params.names()
    for name, p in model.params.items():
        npt.assert_array_equal(loaded[name].data, p.data)
    # saving the loaded store reproduces the file byte for byte
    path2 = tmp_path / "again.ckpt"
    save_checkpoint(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_load_parameters_applies_checkpoint(tmp_path):
    src = build_model(_thin(), Rng(21))
    dst = build_model(_thin(), Rng(22))
    path = tmp_path / "src.ckpt"
    save_checkpoint(src.params, path)
    dst.load_parameters(load_checkpoint(path))
    for name, p in src.params.items():
        npt.assert_array_equal(dst.params[name].data, p.data)


def test_load_parameters_rejects_extra_missing_and_mismatched(tmp_path):
    model = build_model(_thin(), Rng(23))
    store = load_checkpoint(_saved(model, tmp_path))

    extra = load_checkpoint(_saved(model, tmp_path))
    extra.add("bogus.weight", Tensor(np.ones(3), requires_grad=True))
    with pytest.raises(FormatError, match="unknown"):
        model.load_parameters(extra)

    missing = ParameterStore()
    names = store.names()
    for name in names[:-1]:
        missing.add(name, store[name])
    with pytest.raises(FormatError, match="missing"):
        model.load_parameters(missing)

    bad = load_checkpoint(_saved(model, tmp_path))
    first = bad.names()[0]
    reshaped = ParameterStore()
    for name in bad.names():
        t = bad[name]
        reshaped.add(name, Tensor(np.zeros(t.size + 1), requires_grad=True) if name == first else t)
    with pytest.raises(ShapeError, match="shape"):
        model.load_parameters(reshaped)


def _saved(model: Model, tmp_path):
    path = tmp_path / f"ckpt-{len(list(tmp_path.iterdir()))}.ckpt"
    save_checkpoint(model.params, path)
    return path


def test_corrupt_checkpoints_raise_format_errors(tmp_path):
    model = build_model(_thin(), Rng(31))
    path = tmp_path / "good.ckpt"
    save_checkpoint(model.params, path)
    raw = path.read_bytes()

    bad_magic = tmp_path / "magic.ckpt"
    bad_magic.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(bad_magic)

    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(truncated)

    trailing = tmp_path / "trail.ckpt"
    trailing.write_bytes(raw + b"\x00" * 4)
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(trailing)


def test_save_refuses_non_finite(tmp_path):
    model = build_model(_thin(), Rng(33))
    name = model.params.names()[0]
    model.params[name].data.ravel()[0] = np.nan
    with pytest.raises(FormatError, match="non-finite"):
        save_checkpoint(model.params, tmp_path / "nan.ckpt")


# --- width sweep ---------------------------------------------------------------------


@pytest.mark.parametrize("width", [0.125, 0.25])
def test_parameter_count_grows_with_width(width):
    thin = build_model(ModelConfig(width=width), Rng(1)).params.total_parameters()
    assert thin > 0
    if width == 0.25:
        thinner = build_model(ModelConfig(width=0.125), Rng(1)).params.total_parameters()
        assert thin > thinner
