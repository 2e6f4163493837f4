import pytest

from attennkf.config import ConfigError, PipelineConfig, config_hash, dump_config, load_config, model_hash
from attennkf.compensator import VARIANTS


def test_defaults():
    cfg = load_config(text="")
    assert cfg.pipeline.train_seeds == (0, 1, 2)
    assert cfg.pipeline.variants == VARIANTS
    assert cfg.inference.clamp is True
    assert cfg.training.epochs_stage1 == 10 and cfg.training.epochs_stage2 == 25


def test_typed_parsing():
    cfg = load_config(text="[pipeline]\ntrain_seeds = 3, 4\nvariants = NoAtten\n[inference]\nclamp = off\n[scenario]\nspeed = 0.2, 0.4\n")
    assert cfg.pipeline.train_seeds == (3, 4)
    assert cfg.pipeline.variants == ("NoAtten",)
    assert cfg.inference.clamp is False
    assert cfg.scenario.speed == (0.2, 0.4)


@pytest.mark.parametrize(
    "text,field",
    [
        ("[pipeline]\nn_train = 0\n", "pipeline.n_train"),
        ("[pipeline]\nvariants = Fancy\n", "pipeline.variants"),
        ("[pipeline]\nformat = csv\n", "pipeline.format"),
        ("[pipeline]\nn_train = many\n", "pipeline.n_train"),
        ("[pipeline]\nbogus = 1\n", "pipeline.bogus"),
        ("[nosuch]\nx = 1\n", "nosuch"),
        ("[slip]\nsegments = 1\n", "slip.segments"),
        ("[inference]\nblock = 0\n", "inference.block"),
        ("[training]\nlr = -1\n", "training"),
    ],
)
def test_invalid_config_names_field(text, field):
    with pytest.raises(ConfigError) as info:
        load_config(text=text)
    assert info.value.field == field
    assert str(info.value).startswith(field + ":")


def test_dump_roundtrip():
    cfg = load_config(text="[pipeline]\nseed = 7\ntrain_seeds = 1, 2\n[training]\nlr = 0.002\n")
    back = load_config(text=dump_config(cfg))
    assert back == cfg


def test_hash_scopes():
    base = PipelineConfig()
    moved = load_config(text="[pipeline]\nout_dir = elsewhere\n")
    assert config_hash(moved) == config_hash(base)
    unclamped = load_config(text="[inference]\nclamp = false\n")
    assert config_hash(unclamped) != config_hash(base)
    assert model_hash(unclamped) == model_hash(base)
    retrained = load_config(text="[training]\nlr = 0.01\n")
    assert model_hash(retrained) != model_hash(base)
