import numpy as np
import pytest

from msanet import ops
from msanet.blocks import AFeB, AFuB, AMB, ConfigError, Conv, ResidualBlock, SkipFusion
from msanet.gradcheck import grad_check_result, jitter_params, registered
from msanet.tensor import ShapeError, Tensor


def feat(shape, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, shape))


def zero_(*tensors):
    for t in tensors:
        t.data = np.zeros_like(t.data)


class TestConv:
    def test_default_padding_keeps_size(self):
        rng = np.random.default_rng(0)
        for d in (1, 2, 3):
            assert Conv(2, 3, rng, dilation=d)(feat((1, 2, 9, 9))).shape == (1, 3, 9, 9)

    def test_init_bounds(self):
        c = Conv(4, 8, np.random.default_rng(0))
        bound = 1 / np.sqrt(4 * 9)
        assert np.abs(c.weight.data).max() <= bound
        assert np.abs(c.weight.data).max() > 0.8 * bound
        assert np.all(c.bias.data == 0)


class TestResidualBlock:
    def test_shapes(self):
        rng = np.random.default_rng(0)
        assert ResidualBlock(4, 4, rng)(feat((2, 4, 8, 8))).shape == (2, 4, 8, 8)
        assert ResidualBlock(4, 8, rng, stride=2)(feat((2, 4, 8, 8))).shape == (2, 8, 4, 4)

    def test_zeroed_final_conv_is_identity(self):
        blk = ResidualBlock(4, 4, np.random.default_rng(0))
        zero_(blk.conv2.weight, blk.conv2.bias)
        x = feat((1, 4, 8, 8))
        np.testing.assert_array_equal(blk(x).data, x.data)

    def test_bad_stride(self):
        with pytest.raises(ConfigError):
            ResidualBlock(4, 4, np.random.default_rng(0), stride=3)

    def test_param_count(self):
        rng = np.random.default_rng(0)
        assert ResidualBlock(4, 4, rng).num_params() == ResidualBlock.count(4, 4) == 2 * (4 * 4 * 9 + 4)
        assert ResidualBlock(4, 8, rng, 2).num_params() == ResidualBlock.count(4, 8, 2)


class TestAFeB:
    def test_offset_predictor_starts_at_zero(self):
        blk = AFeB(4, np.random.default_rng(0))
        assert np.all(blk.offset.weight.data == 0) and np.all(blk.offset.bias.data == 0)

    def test_initial_sampling_is_half_masked_conv(self):
        # zero offsets, mask = sigmoid(0) = 1/2
        blk = AFeB(4, np.random.default_rng(0))
        x = feat((1, 4, 8, 8))
        want = ops.conv2d(x, Tensor(0.5 * blk.deform_weight.data), blk.deform_bias, padding=1).data
        np.testing.assert_allclose(blk.sample(x).data, want, rtol=1e-5, atol=1e-6)

    def test_zeroed_final_conv_is_identity(self):
        blk = AFeB(4, np.random.default_rng(0))
        jitter_params(blk, np.random.default_rng(1))
        zero_(blk.conv.weight, blk.conv.bias)
        x = feat((1, 4, 8, 8))
        np.testing.assert_array_equal(blk(x).data, x.data)

    def test_param_count(self):
        blk = AFeB(8, np.random.default_rng(0))
        assert blk.num_params() == AFeB.count(8) == (8 * 9 * 27 + 27) + 2 * (8 * 8 * 9 + 8)

    def test_channel_check(self):
        with pytest.raises(ShapeError):
            AFeB(4, np.random.default_rng(0))(feat((1, 3, 8, 8)))


class TestAMB:
    def test_shape_and_branch_widths(self):
        blk = AMB(8, np.random.default_rng(0))
        assert [b.weight.shape for b in blk.branches] == [(2, 8, 3, 3)] * 4
        assert [b.dilation for b in blk.branches] == [1, 2, 3, 4]
        assert blk(feat((2, 8, 8, 8))).shape == (2, 8, 8, 8)

    def test_factors_neutral_when_zeroed(self):
        blk = AMB(4, np.random.default_rng(0))
        zero_(blk.fc_weight, blk.fc_bias, blk.spatial.weight, blk.spatial.bias)
        _, ch, sp = blk(feat((2, 4, 8, 8)), return_factors=True)
        np.testing.assert_array_equal(ch.data, 1.0)
        np.testing.assert_array_equal(sp.data, 1.0)

    def test_factor_ranges(self):
        blk = AMB(4, np.random.default_rng(0))
        jitter_params(blk, np.random.default_rng(2))
        _, ch, sp = blk(feat((1, 4, 8, 8)), return_factors=True)
        assert ch.shape == (1, 4, 1, 1) and sp.shape == (1, 1, 8, 8)
        for f in (ch.data, sp.data):
            assert np.all((f > 0) & (f < 2))

    def test_zeroed_final_conv_is_identity(self):
        blk = AMB(4, np.random.default_rng(0))
        zero_(blk.conv.weight, blk.conv.bias)
        x = feat((1, 4, 8, 8))
        np.testing.assert_array_equal(blk(x).data, x.data)

    def test_indivisible_channels(self):
        with pytest.raises(ConfigError):
            AMB(6, np.random.default_rng(0), (1, 2, 3, 4))

    def test_param_count(self):
        assert AMB(8, np.random.default_rng(0)).num_params() == AMB.count(8)


class TestAFuB:
    def test_upsampling_shape(self):
        blk = AFuB(4, np.random.default_rng(0))
        out = blk(feat((2, 8, 4, 4)), feat((2, 4, 8, 8), 1))
        assert out.shape == (2, 4, 8, 8)

    def test_zeroed_refine_is_fused_sum(self):
        blk = AFuB(4, np.random.default_rng(0))
        jitter_params(blk, np.random.default_rng(1))
        zero_(blk.refine2.weight, blk.refine2.bias)
        coarse, fine = feat((1, 8, 4, 4)), feat((1, 4, 8, 8), 1)
        np.testing.assert_array_equal(blk(coarse, fine).data, blk.fuse(coarse, fine).data)

    def test_zero_deform_weights_pass_coarse_through(self):
        blk = AFuB(4, np.random.default_rng(0), upsample=False)
        zero_(blk.deform_weight, blk.refine2.weight, blk.refine2.bias)
        coarse, fine = feat((1, 4, 8, 8)), feat((1, 4, 8, 8), 1)
        np.testing.assert_array_equal(blk(coarse, fine).data, coarse.data)

    def test_scale_mismatch(self):
        blk = AFuB(4, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            blk(feat((1, 8, 8, 8)), feat((1, 4, 8, 8)))

    @pytest.mark.parametrize("upsample", [True, False])
    def test_param_count(self, upsample):
        assert AFuB(4, np.random.default_rng(0), upsample).num_params() == AFuB.count(4, upsample)


class TestSkipFusion:
    def test_shape(self):
        blk = SkipFusion(4, np.random.default_rng(0), with_resblock=True)
        assert blk(feat((1, 8, 4, 4)), feat((1, 4, 8, 8))).shape == (1, 4, 8, 8)


class TestBlockGradients:
    @pytest.mark.parametrize("target", registered("block"))
    def test_finite_differences(self, target):
        r = grad_check_result(target)
        assert r.checked > 100
        assert r.max_rel_error <= 1e-2
