import pytest

from lutq.config import load_config, parse_config, parse_constraint, parse_layers
from lutq.core import BINARY, FixedSet, PowerOfTwo, PrunedZero, TERNARY, Unconstrained
from lutq.errors import ConfigError

BASE = """
[network]
input_shape = 2
layers = act_quant, affine:16, batchnorm, relu, act_quant, affine:2
"""


@pytest.mark.parametrize("text,expected", [
    ("unconstrained", Unconstrained()), ("pow2", PowerOfTwo()), ("binary", BINARY), ("ternary", TERNARY),
    ("fixed:-1,0.5", FixedSet((-1.0, 0.5))), ("pruned:0.7", PrunedZero(0.7)),
    ("pruned:0.5:pow2", PrunedZero(0.5, PowerOfTwo())),
])
def test_parse_constraint(text, expected):
    assert parse_constraint(text) == expected


@pytest.mark.parametrize("text", ["pow3", "pruned:1.5", "fixed:a,b", "fixed:1,1"])
def test_parse_constraint_errors(text):
    with pytest.raises(ConfigError):
        parse_constraint(text)


def test_parse_layers():
    specs = parse_layers("conv2d:8:3:1:1:nobias, batchnorm, relu, act_quant:4, flatten, affine:10")
    assert [s.kind for s in specs] == ["conv2d", "batchnorm", "relu", "act_quant", "flatten", "affine"]
    assert specs[0].out_features == 8 and specs[0].kernel == 3 and specs[0].padding == 1 and not specs[0].bias
    assert specs[3].bits == 4


@pytest.mark.parametrize("text", ["", "affine", "pool:2", "affine:0", "conv2d:4"])
def test_parse_layers_errors(text):
    with pytest.raises(ConfigError):
        parse_layers(text)


def test_defaults_full_precision():
    cfg = parse_config(BASE)
    assert not cfg.quantized and cfg.lr == 0.1 and cfg.bn_mode == "standard"
    assert cfg.input_shape == (2,)


def test_quantization_section_and_override():
    cfg = parse_config(BASE + """
[quantization]
k = 4
constraint = pruned:0.5:pow2
iterations = 2
[quantization.5]
k = 2
constraint = binary
[bn]
mode = multiplierless
""")
    assert set(cfg.plan) == {1, 5}
    assert cfg.plan[1].K == 4 and cfg.plan[1].constraint == PrunedZero(0.5, PowerOfTwo())
    assert cfg.plan[5].K == 2 and cfg.plan[5].constraint == BINARY
    assert cfg.iterations == 2 and cfg.multiplierless_bn
    assert set(cfg.plan_by_name()) == {"1.W", "5.W"}


@pytest.mark.parametrize("extra", [
    "[quantization]\nlayers = 2\n",
    "[quantization]\nlayers = 9\n",
    "[quantization]\nk = 0\n",
    "[quantization]\niterations = 0\n",
    "[optimizer]\nbatch_size = 1\n",
    "[optimizer]\nlr = -1\n",
    "[bn]\nmode = fancy\n",
    "[activations]\nbits = 1\n",
    "[optimizer]\nepochs = many\n",
])
def test_invalid_configs(extra):
    with pytest.raises(ConfigError):
        parse_config(BASE + extra)


def test_missing_network_section():
    with pytest.raises(ConfigError):
        parse_config("[optimizer]\nlr = 0.1\n")


def test_lr_schedule():
    cfg = parse_config(BASE + "[optimizer]\nlr = 0.4\ndecay_every = 2\ndecay_factor = 0.5\n")
    assert [cfg.lr_at(e) for e in range(5)] == [0.4, 0.4, 0.2, 0.2, 0.1]


def test_with_plan_covers_weight_layers():
    cfg = parse_config(BASE).with_plan(4, PowerOfTwo())
    assert set(cfg.plan) == {1, 5} and cfg.plan[1].constraint == PowerOfTwo()
    assert not cfg.with_plan(None).quantized


def test_relative_data_paths(tmp_path):
    p = tmp_path / "exp.ini"
    p.write_text(BASE + "[data]\nkind = csv\npath = train.csv\n")
    assert load_config(p).data["path"] == str(tmp_path / "train.csv")


def test_output_dir_from_environment(monkeypatch):
    monkeypatch.setenv("LUTQ_OUTPUT_DIR", "/tmp/elsewhere")
    assert parse_config(BASE).output_dir == "/tmp/elsewhere"


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_shipped_example_config_parses():
    from pathlib import Path
    cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "spirals_pow2.ini")
    assert cfg.quantized and cfg.multiplierless_bn
