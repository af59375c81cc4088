import numpy as np
import pytest

from msanet.blocks import AFeB, AMB, ConfigError, ResidualBlock
from msanet.model import VARIANTS, ModelConfig, build, count_params, default_subnet_specs, expected_param_count
from msanet.tensor import ShapeError, Tensor, backward, mean_all, no_grad

SMALL = dict(base_channels=8, subnet_depths=[2, 2, 1, 1])


def image(shape, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, shape))


class TestSubnetSpecs:
    def test_default_depths(self):
        specs = default_subnet_specs([6, 5, 4, 2])
        assert specs[0] == ["AFeB", "AMB"] * 3
        assert specs[-1] == ["AMB", "AMB"]
        for mid in specs[1:-1]:
            assert mid[0] == mid[-1] == "AFeB"
        assert [len(s) for s in specs] == [6, 5, 4, 2]

    def test_negative_depth(self):
        with pytest.raises(ConfigError):
            default_subnet_specs([2, -1])


class TestModelConfig:
    def test_derived_fields(self):
        cfg = ModelConfig().validate()
        assert cfg.scale_channels == [32, 64, 128, 256]
        assert cfg.num_scales == 4
        assert cfg.size_multiple == 8

    def test_json_roundtrip(self):
        cfg = ModelConfig(in_channels=1, **SMALL, variant="AFeB+AMB").validate()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="chanels"):
            ModelConfig.from_dict({"base_chanels": 16})

    @pytest.mark.parametrize("bad", [
        {"in_channels": 2},
        {"variant": "nope"},
        {"subnet_depths": [1]},
        {"subnet_depths": [1] * 6},
        {"base_channels": 6},
        {"subnet_specs": [["AFeB"], ["XYZ"], [], []]},
    ])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            ModelConfig(**bad).validate()

    def test_first_difference(self):
        a = ModelConfig().validate()
        b = ModelConfig(base_channels=16).validate()
        assert a.first_difference(a) is None
        assert a.first_difference(b) == "base_channels"


class TestArchitecture:
    def test_encoder_channels_and_resolutions(self):
        model = build(ModelConfig())
        with no_grad():
            feats = model.encode(image((1, 3, 64, 64)))
        assert [f.shape for f in feats] == [(1, 32, 64, 64), (1, 64, 32, 32), (1, 128, 16, 16), (1, 256, 8, 8)]

    @pytest.mark.parametrize("h,w", [(16, 16), (24, 40), (64, 16)])
    def test_shape_preserved(self, h, w):
        model = build(ModelConfig(**SMALL))
        with no_grad():
            assert model(image((2, 3, h, w))).shape == (2, 3, h, w)

    def test_indivisible_size(self):
        with pytest.raises(ShapeError, match="multiples of 8"):
            build(ModelConfig(**SMALL))(image((1, 3, 20, 16)))

    def test_wrong_channels(self):
        with pytest.raises(ShapeError):
            build(ModelConfig(**SMALL))(image((1, 1, 16, 16)))

    def test_grayscale(self):
        model = build(ModelConfig(in_channels=1, **SMALL))
        with no_grad():
            assert model(image((1, 1, 16, 16))).shape == (1, 1, 16, 16)

    def test_two_scales(self):
        model = build(ModelConfig(base_channels=8, subnet_depths=[1, 1]))
        with no_grad():
            assert model(image((1, 3, 6, 6))).shape == (1, 3, 6, 6)

    def test_seeded_build_is_reproducible(self):
        a, b = build(ModelConfig(**SMALL), seed=4), build(ModelConfig(**SMALL), seed=4)
        for (na, ta), (nb, tb) in zip(a.params.items(), b.params.items()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_block_kinds_follow_specs(self):
        model = build(ModelConfig())
        kinds = [[type(b).__name__ for b in blocks] for blocks in model.subnets]
        assert kinds == default_subnet_specs([6, 5, 4, 2])


class TestParams:
    @pytest.mark.parametrize("variant", sorted(VARIANTS))
    def test_count_matches_closed_form(self, variant):
        cfg = ModelConfig(variant=variant)
        assert count_params(build(cfg)) == expected_param_count(cfg)

    def test_names_unique_and_stable(self):
        names = build(ModelConfig(**SMALL)).params.names()
        assert len(names) == len(set(names))
        assert names == build(ModelConfig(**SMALL), seed=9).params.names()

    def test_init_specs_recorded(self):
        specs = build(ModelConfig(**SMALL)).params.init_specs
        assert specs["subnet0.0.offset.weight"] == "zeros"
        assert specs["encoder0.conv1.weight"].startswith("kaiming_uniform")

    def test_state_dict_roundtrip(self):
        a, b = build(ModelConfig(**SMALL), seed=1), build(ModelConfig(**SMALL), seed=2)
        b.params.load_state_dict(a.params.state_dict())
        x = image((1, 3, 16, 16))
        with no_grad():
            np.testing.assert_array_equal(a(x).data, b(x).data)


class TestVariants:
    @pytest.mark.parametrize("variant", sorted(VARIANTS))
    def test_forward_backward(self, variant):
        model = build(ModelConfig(**SMALL, variant=variant))
        out = model(image((1, 3, 32, 32)))
        assert out.shape == (1, 3, 32, 32)
        backward(mean_all(out))
        missing = [n for n, t in model.params.items() if t.grad is None]
        assert not missing

    def test_block_substitutions(self):
        def kinds(variant):
            m = build(ModelConfig(**SMALL, variant=variant))
            return {type(b) for blocks in m.subnets for b in blocks}, {type(d).__name__ for d in m.decoder}

        assert kinds("full") == ({AFeB, AMB}, {"AFuB"})
        assert kinds("ResB") == ({ResidualBlock}, {"SkipFusion"})
        assert kinds("AFeB") == ({AFeB, ResidualBlock}, {"SkipFusion"})
        assert kinds("AMB+AFuB") == ({AMB, ResidualBlock}, {"AFuB"})
        assert kinds("ED") == (set(), {"SkipFusion"})
