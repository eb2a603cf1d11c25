import numpy as np
import pytest

from cflat.errors import ContractViolation
from cflat.params import ParamVector
from cflat.rng import Xoshiro256, derive_seed, splitmix64


class TestParamVector:
    def test_concat_and_views(self):
        pv = ParamVector.concat([("w", np.arange(6.0).reshape(2, 3)), ("b", np.array([7.0, 8.0, 9.0]))])
        assert len(pv) == 9
        assert pv.view("w").shape == (2, 3)
        assert np.array_equal(pv.view("b"), [7.0, 8.0, 9.0])

    def test_view_shares_memory(self):
        pv = ParamVector.concat([("w", np.zeros((2, 2)))])
        pv.view("w")[0, 0] = 5.0
        assert pv.data[0] == 5.0

    def test_layout_must_be_contiguous(self):
        with pytest.raises(ContractViolation):
            ParamVector(np.zeros(4), [("a", 0, (2,)), ("b", 3, (1,))])

    def test_layout_must_cover_data(self):
        with pytest.raises(ContractViolation):
            ParamVector(np.zeros(5), [("a", 0, (2,))])

    def test_arithmetic_preserves_layout(self):
        pv = ParamVector.dense([1.0, 2.0])
        out = (pv + pv) * 0.5 - np.array([1.0, 2.0])
        assert isinstance(out, ParamVector)
        assert np.array_equal(out.data, [0.0, 0.0])
        assert out.layout == pv.layout


class TestRng:
    def test_splitmix_deterministic(self):
        _, a = splitmix64(42)
        _, b = splitmix64(42)
        assert a == b

    def test_streams_reproducible(self):
        a = Xoshiro256(123).normals(50)
        b = Xoshiro256(123).normals(50)
        assert a.tobytes() == b.tobytes()

    def test_derive_seed_separates_streams(self):
        s1 = derive_seed(7, 1)
        s2 = derive_seed(7, 2)
        assert s1 != s2
        x = Xoshiro256(s1).uniforms(8)
        y = Xoshiro256(s2).uniforms(8)
        assert not np.array_equal(x, y)

    def test_uniform_range(self):
        u = Xoshiro256(5).uniforms(1000)
        assert np.all((u >= 0.0) & (u < 1.0))

    def test_normals_moments(self):
        z = Xoshiro256(9).normals(4000)
        assert abs(z.mean()) < 0.08
        assert abs(z.std() - 1.0) < 0.08

    def test_shuffle_is_permutation(self):
        gen = Xoshiro256(3)
        items = list(range(20))
        gen.shuffle(items)
        assert sorted(items) == list(range(20))

    def test_randbelow_bounds(self):
        gen = Xoshiro256(1)
        draws = [gen.randbelow(7) for _ in range(200)]
        assert min(draws) >= 0 and max(draws) < 7

    def test_unit_vector_norm(self):
        v = Xoshiro256(2).unit_vector(16)
        assert abs(np.linalg.norm(v) - 1.0) < 1e-12

    def test_rademacher_values(self):
        r = Xoshiro256(4).rademacher(64)
        assert set(np.unique(r)) <= {-1.0, 1.0}
