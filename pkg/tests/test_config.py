import pytest

from dualts.config import (
    ABLATION_AXES, DEFAULT_LAMBDA_GRID, load_config, loads_config, parse_config_text,
)
from dualts.errors import ConfigError, MultipleAxes


def test_parse_types_and_comments():
    vals = parse_config_text("""
        # comment
        seed = 3
        train.lr = 1e-3   # trailing comment
        train.stop_gradient = off
        train.grad_clip = none
        data.split = 0.7, 0.15, 0.15
    """)
    assert vals == {"seed": 3, "train.lr": 1e-3, "train.stop_gradient": False, "train.grad_clip": None,
                    "data.split": (0.7, 0.15, 0.15)}


def test_unknown_key_is_named():
    with pytest.raises(ConfigError) as info:
        loads_config("train.lamda = 2")
    assert info.value.key == "train.lamda"
    assert "train.lamda" in str(info.value)


@pytest.mark.parametrize("text", ["seed = x", "seed = 1\nseed = 2", "just words", "train.precision = f16",
                                  "augment.jitter.scale = 1", "encoder.pooling = max"])
def test_malformed_configs(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_defaults_and_derived_values():
    cfg = loads_config("task = classify\ndata.window = 32\nencoder.dropout = 0.2\ntrain.lambda = 0.5")
    assert cfg.synthetic.generator == "class-frequency" and cfg.synthetic.T == 32
    assert cfg.encoder["dropout_attn"] == 0.2
    assert cfg.train.lam == 0.5
    assert cfg.lambda_grid == DEFAULT_LAMBDA_GRID
    assert cfg.encoder_config(1).seq_len == 32


def test_seed_override_reaches_everything():
    cfg = loads_config("seed = 1").with_overrides(seed=9, precision="f64")
    assert (cfg.seed, cfg.train.seed, cfg.synthetic.seed, cfg.train.precision) == (9, 9, 9, "f64")
    assert cfg.digest() != loads_config("seed = 1").digest()


def test_augmentation_params_are_routed():
    cfg = loads_config("train.augmentation = jitter\naugment.jitter.sigma = 0.3")
    assert cfg.train.augmentation_params == {"sigma": 0.3}


@pytest.mark.parametrize("text", ["finetune.label_fractions = 0, 0.5", "finetune.label_fractions = 1.5",
                                  "data.split = 0.5, 0.5", "train.batch_size = 1",
                                  "task = classify\nsynthetic.generator = ar-process",
                                  "encoder.d_model = 10\nencoder.n_heads = 4",
                                  "ablation.axis = dropout", "ablation.lambda_grid = -1, 1",
                                  "dataset.path = x.csv\nsynthetic.N = 10"])
def test_cross_field_rules(text):
    with pytest.raises(ConfigError):
        loads_config(text)


def test_one_ablation_axis_only():
    with pytest.raises(MultipleAxes):
        loads_config("ablation.axis = pooling, lambda")
    for axis in ABLATION_AXES:
        assert loads_config(f"ablation.axis = {axis}").ablation_axis == axis


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")
