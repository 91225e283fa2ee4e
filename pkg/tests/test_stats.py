import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from featforge.stats import (
    DataWatcher,
    InsufficientDataError,
    SiteStats,
    StatsSnapshot,
    batch_stats,
    merge_stats,
    pool_batch,
    pool_instance,
    snapshot,
)
from featforge.tensor import ContractError

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def close(a, b, rel=1e-9):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.allclose(a, b, rtol=rel, atol=rel * max(1.0, np.abs(b).max(initial=0.0)))


class TestPooling:
    def test_constant_map(self):
        np.testing.assert_array_equal(pool_instance(np.full((4, 3, 3), 7.0)), np.full(4, 7.0))

    def test_small_map(self):
        assert pool_instance(np.array([[[1.0, 2.0], [3.0, 4.0]]])).tolist() == [2.5]

    def test_random_map(self, rng):
        fm = rng.standard_normal((5, 4, 6))
        np.testing.assert_allclose(pool_instance(fm), fm.reshape(5, -1).mean(axis=1), rtol=1e-14)

    def test_vector_identity(self):
        v = np.array([0.1, 0.9])
        np.testing.assert_array_equal(pool_instance(v), v)

    def test_batch(self, rng):
        f = rng.standard_normal((3, 2, 4, 4))
        np.testing.assert_allclose(pool_batch(f), np.stack([pool_instance(x) for x in f]))


class TestObserve:
    def test_first_sample(self):
        w = DataWatcher("s", 2, 3)
        w.observe(np.array([1.0, -2.0]), 1)
        np.testing.assert_array_equal(w.stats.mean[1], [1.0, -2.0])
        assert w.stats.count[1] == 1
        np.testing.assert_array_equal(w.stats.var[1], [0.0, 0.0])

    def test_two_samples(self):
        w = DataWatcher("s", 1, 1)
        w.observe(np.array([1.0]), 0)
        w.observe(np.array([3.0]), 0)
        assert w.stats.mean[0, 0] == 2.0 and w.stats.var[0, 0] == 2.0 and w.stats.count[0] == 2

    def test_constant_stream(self):
        w = DataWatcher("s", 3, 1)
        for _ in range(7):
            w.observe(np.array([0.5, 0.5, 0.5]), 0)
        np.testing.assert_array_equal(w.stats.var[0], 0.0)
        np.testing.assert_array_equal(w.stats.mean[0], 0.5)

    @pytest.mark.parametrize("label", [-1, 3])
    def test_bad_label(self, label):
        with pytest.raises(ContractError):
            DataWatcher("s", 1, 3).observe(np.array([0.0]), label)

    def test_class_isolation(self, rng):
        w = DataWatcher("s", 4, 3)
        w.observe_batch(rng.standard_normal((10, 4)), rng.integers(0, 3, 10))
        before = (w.stats.mean[2].copy(), w.stats.var[2].copy(), int(w.stats.count[2]))
        w.observe_batch(rng.standard_normal((5, 4)), np.zeros(5, dtype=int))
        assert np.array_equal(before[0], w.stats.mean[2]) and before[2] == w.stats.count[2]

    def test_class_agnostic_single_bucket(self, rng):
        w = DataWatcher("s", 2, 3, class_agnostic=True)
        w.observe_batch(rng.standard_normal((9, 2)), np.arange(9) % 3)
        assert w.stats.count.tolist() == [9]


class TestMerge:
    def test_empty_identity(self):
        m, v, n = merge_stats((np.array([1.0]), np.array([2.0]), 5), (np.zeros(1), np.zeros(1), 0))
        assert (m.tolist(), v.tolist(), n) == ([1.0], [2.0], 5)

    def test_textbook(self):
        a = batch_stats(np.array([[1.0], [3.0]]))
        b = batch_stats(np.array([[5.0], [7.0]]))
        m, v, n = merge_stats(a, b)
        assert m[0] == 4.0 and v[0] == pytest.approx(20 / 3, rel=1e-15) and n == 4

    def test_equal_batches_no_cross_term(self):
        a = (np.array([2.0]), np.array([3.0]), 4)
        m, v, n = merge_stats(a, a)
        assert m[0] == 2.0 and v[0] == pytest.approx(2 * 3 * 3.0 / 7)

    def test_both_empty(self):
        with pytest.raises(ContractError):
            merge_stats((np.zeros(1), np.zeros(1), 0), (np.zeros(1), np.zeros(1), 0))


@st.composite
def stream(draw, max_n=60, max_d=4):
    n = draw(st.integers(2, max_n))
    d = draw(st.integers(1, max_d))
    return draw(arrays(np.float64, (n, d), elements=finite))


@settings(max_examples=60, deadline=None)
@given(stream(), st.randoms(use_true_random=False))
def test_order_invariance(x, rnd):
    perm = list(range(len(x)))
    rnd.shuffle(perm)
    ws = []
    for order in (range(len(x)), perm):
        w = DataWatcher("s", x.shape[1], 1)
        for i in order:
            w.observe(x[i], 0)
        ws.append(w.stats)
    assert close(ws[0].mean, ws[1].mean) and close(ws[0].var, ws[1].var)
    assert ws[0].count[0] == ws[1].count[0] == len(x)


@settings(max_examples=60, deadline=None)
@given(stream(), st.data())
def test_merge_associativity(x, data):
    i = data.draw(st.integers(1, len(x) - 1))
    j = data.draw(st.integers(i, len(x)))
    a, b, c = batch_stats(x[:i]), batch_stats(x[i:j]), batch_stats(x[j:])
    left = merge_stats(merge_stats(a, b), c)
    right = merge_stats(a, merge_stats(b, c))
    scale = np.abs(x).max() + 1.0
    assert np.allclose(left[0], right[0], rtol=1e-9, atol=1e-9 * scale)
    assert np.allclose(left[1], right[1], rtol=1e-9, atol=1e-9 * scale ** 2)
    assert left[2] == right[2] == len(x)


@settings(max_examples=60, deadline=None)
@given(stream(max_n=200), st.integers(1, 17))
def test_streamed_matches_two_pass(x, chunk):
    w = DataWatcher("s", x.shape[1], 1)
    for s in range(0, len(x), chunk):
        w.observe_batch(x[s:s + chunk], np.zeros(len(x[s:s + chunk]), dtype=int))
    m, v, n = batch_stats(x)
    scale = np.abs(x).max() + 1.0
    assert np.allclose(w.stats.mean[0], m, rtol=1e-9, atol=1e-9 * scale)
    assert np.allclose(w.stats.var[0], v, rtol=1e-9, atol=1e-9 * scale ** 2)
    assert np.all(w.stats.var[0] >= 0)


class TestSnapshot:
    def make(self, rng, counts=(5, 5, 5)):
        ws = [DataWatcher("block0.pre_norm", 4, 3), DataWatcher("logits", 3, 3)]
        labels = np.repeat(np.arange(3), counts)
        for w in ws:
            w.observe_batch(rng.standard_normal((len(labels), w.dim)), labels)
        return ws

    def test_structure(self, rng):
        snap = snapshot(self.make(rng))
        assert snap.site_ids == ["block0.pre_norm", "logits"] and snap.num_classes == 3
        assert snap.site("logits").mean.shape == (3, 3)

    def test_binary_round_trip(self, rng, tmp_path):
        snap = snapshot(self.make(rng))
        snap.save(tmp_path / "s.bin")
        back = StatsSnapshot.load(tmp_path / "s.bin")
        assert back.equals(snap) and back.to_bytes() == snap.to_bytes()

    def test_json_round_trip(self, rng):
        snap = snapshot(self.make(rng))
        assert StatsSnapshot.from_json(snap.to_json()).equals(snap)

    def test_header(self, rng):
        buf = snapshot(self.make(rng)).to_bytes()
        assert buf[:8] == b"NIFFSTAT"
        assert int.from_bytes(buf[8:12], "little") == 1

    def test_bad_magic(self, rng):
        buf = bytearray(snapshot(self.make(rng)).to_bytes())
        buf[0] ^= 0xFF
        with pytest.raises(ValueError):
            StatsSnapshot.from_bytes(bytes(buf))

    def test_insufficient(self, rng):
        with pytest.raises(InsufficientDataError) as err:
            snapshot(self.make(rng, counts=(5, 1, 5)))
        assert err.value.class_id == 1 and err.value.site_id == "block0.pre_norm"

    def test_independent_of_watchers(self, rng):
        ws = self.make(rng)
        snap = snapshot(ws)
        frozen = snap.site("logits").mean.copy()
        ws[1].observe_batch(rng.standard_normal((4, 3)), np.zeros(4, dtype=int))
        np.testing.assert_array_equal(snap.site("logits").mean, frozen)

    def test_matches_one_pass(self, rng):
        w = DataWatcher("x", 3, 2)
        xs, ys = rng.standard_normal((500, 3)) * 3 + 1, rng.integers(0, 2, 500)
        for s in range(0, 500, 37):
            w.observe_batch(xs[s:s + 37], ys[s:s + 37])
        site = snapshot([w]).site("x")
        for c in range(2):
            m, v, n = batch_stats(xs[ys == c])
            assert close(site.mean[c], m) and close(site.var[c], v) and site.count[c] == n


def test_site_stats_dim():
    assert SiteStats("a", np.zeros((2, 5)), np.zeros((2, 5)), np.array([2, 2])).dim == 5
