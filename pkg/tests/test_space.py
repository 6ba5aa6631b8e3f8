import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpsupernet.space import (ConfigError, SearchSpace, SubnetConfig, count_configs, is_valid,
                              iter_configs, parse_subnet, sample_uniform, to_string, uniform_config,
                              validate_config)

SPACE = SearchSpace()


def test_string_roundtrip_example():
    text = "res=64;d=3,2;mlp=4,4,2,2,4;bits=" + ",".join(["w8a8"] * 7)
    cfg = parse_subnet(text)
    assert cfg.depths == (3, 2) and cfg.mlp_ratios == ((4, 4, 2), (2, 4))
    assert to_string(cfg) == text
    validate_config(SPACE, cfg)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_random_configs_roundtrip_and_validate(seed):
    cfg = sample_uniform(SPACE, np.random.default_rng(seed))
    validate_config(SPACE, cfg)
    assert parse_subnet(to_string(cfg)) == cfg


def test_singleton_space_samples_the_unique_config():
    sp = SearchSpace(resolutions=(32,), depths=((2,), (3,)), mlp_ratios=(4,), weight_bits=(8,), act_bits=(4,))
    only = list(iter_configs(sp))
    assert len(only) == 1 == count_configs(sp)
    assert sample_uniform(sp, np.random.default_rng(5)) == only[0]


def test_sampling_is_seed_deterministic():
    a = [sample_uniform(SPACE, np.random.default_rng(3)) for _ in range(2)]
    assert a[0] == a[1]


def test_bit_options_uniform_within_five_sigma():
    rng = np.random.default_rng(0)
    n = 10_000
    counts = {b: 0 for b in SPACE.weight_bits}
    for _ in range(n):
        counts[sample_uniform(SPACE, rng).embed_bits[0]] += 1
    p = 1 / len(counts)
    sigma = (n * p * (1 - p)) ** 0.5
    for b, c in counts.items():
        assert abs(c - n * p) < 5 * sigma, (b, c)


def test_max_config_is_valid():
    cfg = SPACE.max_config()
    validate_config(SPACE, cfg)
    assert cfg.resolution == 64 and cfg.depths == (3, 3)


def test_errors_name_the_field():
    cfg = SPACE.max_config()
    bad = SubnetConfig(40, cfg.depths, cfg.mlp_ratios, cfg.block_bits, cfg.embed_bits, cfg.out_bits)
    with pytest.raises(ConfigError, match="resolution"):
        validate_config(SPACE, bad)


def test_bits_on_dropped_layer_rejected():
    # depth 2 for stage 0 but six bit entries: index 5 belongs to a dropped layer
    base = uniform_config(SPACE, 64, (2, 2), 4.0, (8, 8))
    bad = SubnetConfig(64, (2, 2), base.mlp_ratios, (((8, 8),) * 6, base.block_bits[1]),
                       base.embed_bits, base.out_bits)
    with pytest.raises(ConfigError, match="dropped layer"):
        validate_config(SPACE, bad)


@pytest.mark.parametrize("text", [
    "res=64;d=3,2;mlp=4,4;bits=w8a8",
    "res=64;d=2,2;mlp=4,4,4,4;bits=w8a8,w8a8,w8a8,w8a8,w8a8,w7a8",
    "res=64;d=2,2",
    "res=sixty;d=2,2;mlp=4,4,4,4;bits=w8a8",
])
def test_bad_strings(text):
    with pytest.raises(ConfigError):
        validate_config(SPACE, parse_subnet(text))


def test_count_matches_enumeration():
    sp = SearchSpace(resolutions=(32, 64), depths=((1, 2),), mlp_ratios=(2, 4), weight_bits=(4, 8), act_bits=(8,))
    cfgs = list(iter_configs(sp))
    assert len(cfgs) == count_configs(sp) == len({to_string(c) for c in cfgs})
    assert all(is_valid(sp, c) for c in cfgs)


def test_restrict_pins_other_operators():
    sp = SPACE.restrict("bits")
    assert sp.resolutions == (64,) and sp.depths == ((3,), (3,)) and sp.mlp_ratios == (4.0,)
    assert sp.weight_bits == SPACE.weight_bits
    assert SPACE.restrict("depth").depths == SPACE.depths
    with pytest.raises(ConfigError):
        SPACE.restrict("width")


def test_space_validation():
    with pytest.raises(ConfigError):
        SearchSpace(resolutions=(30,))
    with pytest.raises(ConfigError):
        SearchSpace(weight_bits=(5,))
    with pytest.raises(ConfigError):
        SearchSpace(mlp_ratios=())


def test_tokens_and_hidden():
    assert [SPACE.tokens(r) for r in SPACE.resolutions] == [16, 36, 64]
    assert SPACE.hidden_dim(2.0) == 64 and SPACE.hidden_dim(1.5) == 48
