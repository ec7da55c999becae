"""Convolution forward contracts against the naive nested-loop references."""

import numpy as np
import pytest

import oracles
from selformer.tensor import ConvSpec, Tensor, conv2d, conv3d


class TestConv2d:
    def test_constant_input_allones_depthwise(self):
        x = Tensor(np.ones((1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, None, ConvSpec.same((3, 3), groups=1)).data
        assert out[0, 1, 1] == 9.0
        for i, j in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert out[0, i, j] == 4.0
        ref = oracles.conv2d_reference(x.data, w.data, padding=1)
        assert np.array_equal(out, ref)

    def test_pointwise_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(3, 4, 4)))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        out = conv2d(x, w, Tensor(np.zeros(3)), ConvSpec.same((1, 1))).data
        assert np.allclose(out, x.data, atol=0)

    def test_dilated_delta_taps(self):
        x = np.zeros((1, 5, 5))
        x[0, 2, 2] = 1.0
        w = Tensor(np.ones((1, 1, 5, 5)))
        out = conv2d(Tensor(x), w, None, ConvSpec.same((5, 5), dilation=2, groups=1)).data
        ref = oracles.conv2d_reference(x, w.data, dilation=2, padding=4)
        assert np.array_equal(out, ref)
        # only positions reachable by a dilation-2 tap from the center fire
        hits = {(i, j) for i in range(5) for j in range(5) if out[0, i, j] == 1.0}
        assert hits == {(i, j) for i in range(0, 5, 2) for j in range(0, 5, 2)}
        assert np.all((out == 0) | (out == 1))

    @pytest.mark.parametrize("groups,cin,cout", [(1, 3, 4), (2, 4, 6), (5, 5, 5)])
    def test_random_matches_reference(self, groups, cin, cout):
        rng = np.random.default_rng(groups)
        x = rng.normal(size=(cin, 7, 6))
        w = rng.normal(size=(cout, cin // groups, 3, 3))
        b = rng.normal(size=cout)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), ConvSpec.same((3, 3), groups=groups)).data
        ref = oracles.conv2d_reference(x, w, b, padding=1, groups=groups)
        assert np.max(np.abs(got - ref)) < 1e-10

    def test_strided_patchify_matches_reference(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 8, 8))
        w = rng.normal(size=(5, 3, 2, 2))
        got = conv2d(Tensor(x), Tensor(w), None, ConvSpec.strided((2, 2), 2)).data
        assert got.shape == (5, 4, 4)
        ref = oracles.conv2d_reference(x, w, stride=2)
        assert np.max(np.abs(got - ref)) < 1e-10

    def test_batched_same_as_per_sample(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(4, 3, 5, 5))
        w = rng.normal(size=(6, 3, 3, 3))
        b = rng.normal(size=6)
        spec = ConvSpec.same((3, 3))
        batched = conv2d(Tensor(x), Tensor(w), Tensor(b), spec).data
        for s in range(4):
            single = conv2d(Tensor(x[s]), Tensor(w), Tensor(b), spec).data
            assert np.array_equal(batched[s], single)

    def test_same_padding_preserves_extent(self):
        rng = np.random.default_rng(2)
        for h, w_ext in [(1, 1), (3, 5), (8, 8)]:
            x = rng.normal(size=(2, h, w_ext))
            w = rng.normal(size=(2, 1, 3, 3))
            out = conv2d(Tensor(x), Tensor(w), None, ConvSpec.same((3, 3), groups=2))
            assert out.shape == (2, h, w_ext)

    def test_channel_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((3, 4, 4)))
        w = Tensor(np.zeros((4, 2, 3, 3)))
        with pytest.raises(ValueError) as err:
            conv2d(x, w, None, ConvSpec.same((3, 3)))
        assert "3 channels" in str(err.value) and "(4, 2, 3, 3)" in str(err.value)

    def test_even_kernel_with_padding_rejected(self):
        with pytest.raises(ValueError, match="even"):
            ConvSpec(kernel=(2, 2), dilation=(1, 1), padding=(1, 1), stride=(1, 1))
        with pytest.raises(ValueError, match="odd"):
            ConvSpec.same((2, 2))


class TestConv3d:
    def test_pointwise_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        w = Tensor(np.eye(2).reshape(2, 2, 1, 1, 1))
        out = conv3d(x, w, Tensor(np.zeros(2)), ConvSpec.same((1, 1, 1))).data
        assert np.allclose(out, x.data, atol=0)

    def test_depthwise_constant_center(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 1, 3, 3)))
        out = conv3d(x, w, None, ConvSpec.same((1, 3, 3), groups=1)).data
        assert out[0, 0, 1, 1] == 9.0
        ref = oracles.conv3d_reference(x.data, w.data, padding=(0, 1, 1))
        assert np.array_equal(out, ref)

    def test_pointwise_channel_mixing_rows(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(2, 2, 3, 3))
        rows = np.array([[1, 0], [0, 1], [1, 1], [1, -1], [2, 0], [0, 2]], dtype=float)
        w = rows.reshape(6, 2, 1, 1, 1)
        got = conv3d(Tensor(x), Tensor(w), None, ConvSpec.same((1, 1, 1))).data
        # per-voxel matrix multiply oracle
        for z in range(2):
            for i in range(3):
                for j in range(3):
                    assert np.allclose(got[:, z, i, j], rows @ x[:, z, i, j], atol=1e-14)

    @pytest.mark.parametrize("groups", [1, 3])
    def test_random_matches_reference(self, groups):
        rng = np.random.default_rng(31 + groups)
        cin = 3 * groups if groups > 1 else 2
        cout = 6 if groups == 3 else 4
        x = rng.normal(size=(cin, 4, 5, 5))
        w = rng.normal(size=(cout, cin // groups, 1, 3, 3))
        got = conv3d(Tensor(x), Tensor(w), None, ConvSpec.same((1, 3, 3), groups=groups)).data
        ref = oracles.conv3d_reference(x, w, padding=(0, 1, 1), groups=groups)
        assert np.max(np.abs(got - ref)) < 1e-10

    def test_shape_preserved(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(4, 3, 6, 7)))
        w = Tensor(rng.normal(size=(4, 1, 1, 3, 3)))
        out = conv3d(x, w, None, ConvSpec.same((1, 3, 3), groups=4))
        assert out.shape == (4, 3, 6, 7)
