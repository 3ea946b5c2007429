"""Tensor values, parameter collections, and the mean-L1 distance."""

import numpy as np
import pytest

from merge_surgeon.tensors import (
    ParamSet,
    TensorError,
    as_tensor,
    bitwise_equal,
    block_index,
    head_task,
    is_backbone_name,
    l1_mean_distance,
    shape_compatible,
)


class TestL1MeanDistance:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 7))
        assert l1_mean_distance(a, a.copy()) == 0.0

    def test_constant_shift(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((3, 5)).astype(np.float32)
        assert l1_mean_distance(a, a + np.float32(0.5)) == pytest.approx(0.5, abs=1e-7)

    def test_against_zero_matrix(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert l1_mean_distance(a, np.zeros((2, 2))) == 2.5

    def test_symmetric_nonnegative_zero_iff_equal(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a = rng.standard_normal((5, 3))
            b = rng.standard_normal((5, 3))
            d_ab = l1_mean_distance(a, b)
            assert d_ab == l1_mean_distance(b, a)
            assert d_ab >= 0
            assert (d_ab == 0) == np.array_equal(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(TensorError):
            l1_mean_distance(np.zeros((2, 2)), np.zeros((2, 3)))


class TestAsTensor:
    def test_rejects_non_finite(self):
        with pytest.raises(TensorError):
            as_tensor([1.0, np.nan])
        with pytest.raises(TensorError):
            as_tensor([np.inf])

    def test_rejects_zero_dimension(self):
        with pytest.raises(TensorError):
            as_tensor(np.zeros((0, 3)))

    def test_read_only_float32(self):
        t = as_tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float32
        with pytest.raises(ValueError):
            t[0, 0] = 9.0


class TestParamSet:
    def test_insertion_order_preserved(self):
        ps = ParamSet([("b", [1.0]), ("a", [2.0]), ("c", [3.0])])
        assert ps.names() == ("b", "a", "c")

    def test_duplicate_name_rejected(self):
        with pytest.raises(TensorError):
            ParamSet([("x", [1.0]), ("x", [2.0])])

    def test_backbone_head_split(self):
        ps = ParamSet(
            [
                ("block1.weight", np.ones((2, 2))),
                ("block1.bias", np.ones(2)),
                ("head.0.weight", np.ones((3, 2))),
                ("head.0.bias", np.ones(3)),
            ]
        )
        assert ps.backbone().names() == ("block1.weight", "block1.bias")
        assert ps.heads().names() == ("head.0.weight", "head.0.bias")
        assert ps.head(0).names() == ("head.0.weight", "head.0.bias")
        assert ps.num_blocks() == 1
        with pytest.raises(KeyError):
            ps.head(3)

    def test_name_pattern_helpers(self):
        assert block_index("block12.weight") == 12
        assert block_index("head.0.weight") is None
        assert head_task("head.3.bias") == "3"
        assert is_backbone_name("block2.bias")
        assert not is_backbone_name("block2.scale")

    def test_shape_compatible(self):
        a = ParamSet([("x", np.zeros((2, 3)))])
        b = ParamSet([("x", np.ones((2, 3)))])
        c = ParamSet([("x", np.zeros((3, 2)))])
        d = ParamSet([("y", np.zeros((2, 3)))])
        assert shape_compatible(a, b)
        assert not shape_compatible(a, c)
        assert not shape_compatible(a, d)

    def test_bitwise_equal(self):
        a = ParamSet([("x", [1.5, -2.25])])
        b = ParamSet([("x", [1.5, -2.25])])
        c = ParamSet([("x", [1.5, -2.251])])
        assert bitwise_equal(a, b)
        assert not bitwise_equal(a, c)
