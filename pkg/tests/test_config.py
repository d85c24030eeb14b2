import pytest

from certlip.config import ConfigError, RunConfig, load_config, parse_config, serialize_config


def test_defaults_round_trip():
    cfg = RunConfig()
    text = serialize_config(cfg)
    assert parse_config(text) == cfg
    assert serialize_config(parse_config(text)) == text


def test_partial_config_uses_defaults():
    cfg = parse_config("[train]\nloss = gloro_ce\nepochs = 3\n[data]\nkind = rings\n")
    assert cfg.train.loss == "gloro_ce" and cfg.train.epochs == 3
    assert cfg.train.lookahead is True and cfg.data.kind == "rings"
    assert parse_config(serialize_config(cfg)) == cfg


@pytest.mark.parametrize("text", [
    "[train]\nbogus = 1\n",
    "[nope]\nx = 1\n",
    "[train]\nepochs = many\n",
    "[train]\nepochs = 0\n",
    "[train]\nloss = hinge\n",
    "[train]\nlookahead = maybe\n",
    "[model]\nfamily = vit\n",
    "[data]\nkind = cifar\n",
    "no section header\n",
])
def test_rejections(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_with_seed_and_load(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nseed = 3\n")
    cfg = load_config(p)
    assert cfg.train.seed == 3 and cfg.with_seed(9).train.seed == 9
