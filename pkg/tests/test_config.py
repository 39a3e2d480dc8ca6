import pytest

from lvae.config import RunConfig, dumps, loads


def test_defaults_round_trip():
    cfg = RunConfig()
    assert loads(dumps(cfg)) == cfg


def test_overrides_round_trip():
    cfg = loads("gen.instances = 7\nmodel.encoder_hidden = 5,3  # comment\ntrain.bound = exact\ntrain.lr = 0.25\n")
    assert cfg.gen.instances == 7 and cfg.model.encoder_hidden == (5, 3)
    assert cfg.train.bound == "exact" and cfg.train.lr == 0.25
    assert loads(dumps(cfg)) == cfg


def test_with_seed_sets_both_seeds():
    cfg = RunConfig().with_seed(9)
    assert cfg.gen.seed == 9 and cfg.train.seed == 9


@pytest.mark.parametrize("text", ["train.nope = 1", "other.lr = 1", "train = 1", "just words"])
def test_unknown_or_malformed_keys_rejected(text):
    with pytest.raises(ValueError, match="line 1"):
        loads(text)


@pytest.mark.parametrize("text", ["train.epochs = many", "train.bound = D9", "gen.missing = 1.5"])
def test_bad_values_rejected(text):
    with pytest.raises(ValueError):
        loads(text)
