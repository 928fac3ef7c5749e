"""Event container, voxelization, reversal, masking, and EVS1 file checks."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eiflow.events import (Event, EventStream, event_mask, read_events,
                           reverse, voxelize, write_events)


def make_stream(rows, t_start=0, t_end=10, width=8, height=6):
    xs, ys, ts, ps = zip(*rows) if rows else ((), (), (), ())
    return EventStream(xs, ys, ts, ps, t_start, t_end, width, height)


def random_stream(rng, n, width=8, height=6, t_start=0, t_end=1000):
    ts = np.sort(rng.integers(t_start, t_end + 1, n))
    return EventStream(
        rng.integers(0, width, n), rng.integers(0, height, n), ts,
        rng.choice([-1, 1], n), t_start, t_end, width, height,
    )


# -- construction and validation -------------------------------------------------


def test_stream_validation_errors():
    with pytest.raises(ValueError):
        make_stream([(0, 0, 5, 1), (0, 0, 3, 1)])  # unsorted
    with pytest.raises(ValueError):
        make_stream([(8, 0, 5, 1)])  # x out of bounds
    with pytest.raises(ValueError):
        make_stream([(0, 6, 5, 1)])  # y out of bounds
    with pytest.raises(ValueError):
        make_stream([(0, 0, 5, 2)])  # bad polarity
    with pytest.raises(ValueError):
        make_stream([(0, 0, 11, 1)])  # after window end
    with pytest.raises(ValueError):
        EventStream([], [], [], [], 10, 0, 8, 6)  # inverted window


def test_stream_iteration_and_len():
    s = make_stream([(1, 2, 3, 1), (4, 5, 7, -1)])
    assert len(s) == 2
    assert list(s) == [Event(1, 2, 3, 1), Event(4, 5, 7, -1)]


# -- voxelize ---------------------------------------------------------------


def test_voxelize_event_at_window_start():
    s = make_stream([(2, 3, 0, 1)])
    vol = voxelize(s, bins=5)
    assert vol.data.shape == (10, 6, 8)
    assert vol.data[0, 3, 2] == 1.0
    assert vol.data.sum() == 1.0


def test_voxelize_fractional_position():
    # t_hat = 0.3 with 5 bins: position 1.2 splits 0.8 / 0.2 between bins 1, 2.
    s = make_stream([(2, 3, 3, 1)], t_start=0, t_end=10)
    vol = voxelize(s, bins=5)
    assert vol.data[1, 3, 2] == pytest.approx(0.8, abs=1e-7)
    assert vol.data[2, 3, 2] == pytest.approx(0.2, abs=1e-7)
    assert vol.data.sum() == pytest.approx(1.0, abs=1e-7)


def test_voxelize_linearity_duplicate_events():
    one = voxelize(make_stream([(2, 3, 4, -1)]), bins=5)
    two = voxelize(make_stream([(2, 3, 4, -1), (2, 3, 4, -1)]), bins=5)
    assert np.allclose(two.data, 2.0 * one.data)
    assert two.data.sum() == pytest.approx(2.0)


def test_voxelize_polarity_separation(rng):
    s = random_stream(rng, 50)
    pos_only = EventStream(s.xs[s.ps > 0], s.ys[s.ps > 0], s.ts[s.ps > 0],
                           s.ps[s.ps > 0], s.t_start, s.t_end, s.width, s.height)
    vol = voxelize(pos_only, bins=5)
    assert np.all(vol.data[5:] == 0)
    assert vol.data[:5].sum() > 0


def test_voxelize_event_at_window_end_kept():
    s = make_stream([(1, 1, 10, 1)])
    vol = voxelize(s, bins=5)
    assert vol.data[4, 1, 1] == 1.0


def test_voxelize_empty_and_degenerate_window():
    empty = make_stream([])
    assert voxelize(empty, bins=3).data.sum() == 0.0
    instant = make_stream([(0, 0, 5, 1), (1, 1, 5, -1)], t_start=5, t_end=5)
    vol = voxelize(instant, bins=4)
    assert vol.data[0, 0, 0] == 1.0  # t_hat defined as 0
    assert vol.data[4, 1, 1] == 1.0
    assert vol.data.sum() == 2.0


def test_voxelize_single_bin():
    s = make_stream([(0, 0, 7, 1), (1, 1, 9, -1)])
    vol = voxelize(s, bins=1)
    assert vol.data.shape == (2, 6, 8)
    assert vol.data.sum() == 2.0


@settings(max_examples=40, deadline=None)
@given(n=st.integers(0, 200), seed=st.integers(0, 2**31 - 1))
def test_volume_mass_equals_event_count(n, seed):
    s = random_stream(np.random.default_rng(seed), n)
    vol = voxelize(s, bins=5)
    assert abs(float(vol.data.sum()) - n) <= 1e-5 * max(n, 1)


@settings(max_examples=60, deadline=None)
@given(t_hat=st.floats(0.0, 1.0), bins=st.integers(2, 9))
def test_bin_weight_partition(t_hat, bins):
    pos = t_hat * (bins - 1)
    weights = [max(0.0, 1.0 - abs(b - pos)) for b in range(bins)]
    assert abs(sum(weights) - 1.0) < 1e-12


# -- reverse -----------------------------------------------------------


def test_reverse_endpoint_mapping():
    s = make_stream([(0, 0, 0, 1), (1, 1, 10, -1)])
    r = reverse(s)
    assert list(r) == [Event(1, 1, 0, 1), Event(0, 0, 10, -1)]
    assert (r.t_start, r.t_end) == (0, 10)


def test_reverse_single_event_arithmetic():
    r = reverse(make_stream([(2, 2, 3, 1)]))
    ev = list(r)[0]
    assert (ev.t, ev.p) == (7, -1)


def test_reverse_involution_exact(rng):
    s = random_stream(rng, 120)
    rr = reverse(reverse(s))
    for a, b in zip(("xs", "ys", "ts", "ps"), ("xs", "ys", "ts", "ps")):
        assert np.array_equal(getattr(s, a), getattr(rr, b))


def test_reverse_preserves_volume_mass(rng):
    s = random_stream(rng, 75)
    assert voxelize(reverse(s), 5).data.sum() == pytest.approx(
        float(voxelize(s, 5).data.sum()), rel=1e-6
    )


# -- event_mask -----------------------------------------------------


def test_event_mask_examples():
    assert event_mask(make_stream([])).sum() == 0
    m = event_mask(make_stream([(3, 2, 1, 1), (3, 2, 2, -1), (3, 2, 3, 1)]))
    assert m[2, 3] == 1 and m.sum() == 1
    s = EventStream([0, 1], [0, 1], [1, 2], [1, -1], 0, 10, 2, 2)
    assert np.array_equal(event_mask(s), np.array([[1, 0], [0, 1]], dtype=np.uint8))


# -- clip ---------------------------------------------------------------


def test_clip_prefix(rng):
    s = random_stream(rng, 100, t_end=1000)
    c = s.clip(400)
    assert c.t_end == 400
    assert np.all(c.ts <= 400)
    assert len(c) == int(np.sum(s.ts <= 400))
    with pytest.raises(ValueError):
        s.clip(2000)


# -- EVS1 file format -------------------------------------------------------


def test_evs_roundtrip_bitexact(tmp_path, rng):
    s = random_stream(rng, 64, width=100, height=80, t_end=123456)
    p1, p2 = tmp_path / "a.evs", tmp_path / "b.evs"
    write_events(p1, s)
    back = read_events(p1)
    write_events(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(back.xs, s.xs) and np.array_equal(back.ps, s.ps)
    assert (back.t_start, back.t_end) == (s.t_start, s.t_end)
    assert (back.width, back.height) == (s.width, s.height)


def test_evs_record_size(tmp_path):
    s = make_stream([(1, 2, 3, 1), (4, 5, 6, -1)])
    path = tmp_path / "two.evs"
    write_events(path, s)
    assert path.stat().st_size == 4 + 32 + 2 * 16


def test_evs_errors(tmp_path):
    bad = tmp_path / "bad.evs"
    bad.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(ValueError):
        read_events(bad)
    trunc = tmp_path / "trunc.evs"
    s = make_stream([(1, 2, 3, 1)])
    write_events(trunc, s)
    trunc.write_bytes(trunc.read_bytes()[:-5])
    with pytest.raises(ValueError):
        read_events(trunc)
