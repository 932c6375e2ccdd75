import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikegaze.events import (
    DataFormatError,
    LabelTrack,
    Session,
    bin_events,
    interpolate_labels,
    load_events,
    load_labels,
    load_session,
    make_events,
    session_to_tensors,
    write_events,
    write_labels,
)


def write(path, text):
    path.write_text(text)
    return str(path)


def test_bin_single_event(tmp_path):
    ev = make_events([1500], [639], [479], [1])
    frames = bin_events(ev, duration_ms=3)
    dense = frames.to_dense()
    assert dense.shape == (3, 2, 60, 80)
    assert dense[1, 0, 59, 79] == 1
    assert dense.sum() == 1


def test_bin_polarity_channels_and_bounds():
    ev = make_events([0, 999, 1000, 2999], [0, 8, 16, 24], [0, 0, 8, 8], [1, -1, -1, 1])
    d = bin_events(ev, duration_ms=3).to_dense()
    assert d[0, 0, 0, 0] == 1 and d[0, 1, 0, 1] == 1
    assert d[1, 1, 1, 2] == 1
    assert d[2, 0, 1, 3] == 1


def test_events_past_duration_are_dropped():
    ev = make_events([0, 5000], [0, 0], [0, 0], [1, 1])
    frames = bin_events(ev, duration_ms=2)
    assert frames.total() == 1 and frames.dropped == 1


def _brute_bin(ev, n):
    out = np.zeros((n, 2, 60, 80), np.int64)
    for t, x, y, p in ev:
        k = t // 1000
        if k < n:
            out[k, 0 if p > 0 else 1, y // 8, x // 8] += 1
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 300), st.integers(0, 2**31 - 1))
def test_binning_matches_brute_force_and_conserves(n_ev, seed):
    rng = np.random.default_rng(seed)
    ev = make_events(rng.integers(0, 5000, n_ev), rng.integers(0, 640, n_ev), rng.integers(0, 480, n_ev),
                     rng.choice([-1, 1], n_ev))
    frames = bin_events(ev, duration_ms=5)
    dense = frames.to_dense()
    assert np.array_equal(dense, _brute_bin(ev, 5))
    assert frames.total() == n_ev
    # permutation invariance
    shuffled = ev[rng.permutation(n_ev)]
    assert np.array_equal(bin_events(shuffled, duration_ms=5).to_dense(), dense)


def test_window_pads_past_end():
    ev = make_events([0, 1000], [0, 0], [0, 0], [1, 1])
    frames = bin_events(ev, duration_ms=2)
    w = frames.window(1, 3)
    assert w.shape == (3, 2, 60, 80)
    assert w[0].sum() == 1 and w[1:].sum() == 0


def test_load_events_header_and_polarity_zero(tmp_path):
    p = write(tmp_path / "e.csv", "t_us,x,y,p\n20,1,2,0\n10,3,4,1\n")
    ev = load_events(p)
    assert list(ev["t"]) == [10, 20]
    assert list(ev["p"]) == [1, -1]


def test_load_events_without_header(tmp_path):
    p = write(tmp_path / "e.csv", "5,1,2,-1\n")
    assert load_events(p)["p"][0] == -1


@pytest.mark.parametrize("row,fragment", [
    ("1,640,0,1", "outside"),
    ("1,0,480,1", "outside"),
    ("-1,0,0,1", "negative"),
    ("1,0,0,2", "polarity"),
    ("1,0,0", "fields"),
    ("1,a,0,1", "non-integer"),
])
def test_load_events_rejects_bad_rows(tmp_path, row, fragment):
    p = write(tmp_path / "e.csv", "t_us,x,y,p\n0,0,0,1\n" + row + "\n")
    with pytest.raises(DataFormatError) as e:
        load_events(p)
    assert e.value.line == 3
    assert fragment in str(e.value)


def test_event_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    ev = make_events(rng.integers(0, 10**6, 50), rng.integers(0, 640, 50), rng.integers(0, 480, 50),
                     rng.choice([-1, 1], 50))
    write_events(str(tmp_path / "e.csv"), ev)
    assert np.array_equal(load_events(str(tmp_path / "e.csv")), ev)


def test_labels_roundtrip_and_rate(tmp_path):
    track = LabelTrack(100.0, np.linspace(10, 20, 8), np.linspace(5, 6, 8), [0, 0, 1, 0, 0, 0, 0, 0])
    write_labels(str(tmp_path / "l.csv"), track)
    back = load_labels(str(tmp_path / "l.csv"))
    assert back.rate_hz == pytest.approx(100.0)
    np.testing.assert_allclose(back.x, track.x, atol=1e-4)
    assert np.array_equal(back.blink, track.blink)


def test_labels_reject_nonmonotonic(tmp_path):
    p = write(tmp_path / "l.csv", "t_us,x,y,blink\n0,1,1,0\n10000,1,1,0\n5000,1,1,0\n")
    with pytest.raises(DataFormatError):
        load_labels(p)


def test_labels_reject_bad_blink(tmp_path):
    p = write(tmp_path / "l.csv", "0,1,1,0\n10000,1,1,3\n")
    with pytest.raises(DataFormatError):
        load_labels(p)


def test_interpolation_hits_knots_and_linear_exact():
    x = 3.0 + 0.5 * np.arange(10)
    track = LabelTrack(100.0, x, 2 * x, np.zeros(10))
    up = interpolate_labels(track, 1000.0)
    assert len(up) == 91   # up to and including the last knot
    np.testing.assert_allclose(up.x[::10], x, atol=1e-12)
    # a natural spline reproduces a straight line exactly
    np.testing.assert_allclose(up.x[:91], 3.0 + 0.05 * np.arange(91), atol=1e-12)


def test_interpolation_blink_nearest_and_edge_hold():
    blink = np.zeros(6, bool)
    blink[2] = True
    track = LabelTrack(100.0, np.arange(6.0), np.arange(6.0), blink)
    up = interpolate_labels(track, 1000.0, duration_ms=70)
    assert up.blink[15:25].all() and not up.blink[:15].any() and not up.blink[25:].any()
    assert np.all(up.x[50:] == 5.0)


def test_interpolation_needs_four_samples():
    with pytest.raises(ValueError):
        interpolate_labels(LabelTrack(100.0, [1, 2, 3], [1, 2, 3], [0, 0, 0]))


def test_session_load_and_windows(tmp_path):
    d = tmp_path / "s"
    d.mkdir()
    write(d / "events.csv", "t_us,x,y,p\n0,8,8,1\n25000,16,16,-1\n")
    write(d / "labels.csv", "t_us,x,y,blink\n" + "".join(f"{k * 10000},{80 + k},{40},0\n" for k in range(6)))
    s = load_session(str(d))
    assert len(s) == 60
    assert s.labels.x[10] == pytest.approx(81 / 8)
    wins = list(session_to_tensors(s, window_ms=20, stride_ms=10))
    assert len(wins) == 5
    w, lab, bl = wins[0]
    assert w.shape == (20, 2, 60, 80) and lab.shape == (20, 2) and bl.shape == (20,)
    assert w[0, 0, 1, 1] == 1


def test_session_requires_frame_rate_labels():
    frames = bin_events(make_events([0], [0], [0], [1]), duration_ms=10)
    with pytest.raises(ValueError):
        Session("x", frames, LabelTrack(100.0, np.zeros(4), np.zeros(4), np.zeros(4)))


def test_short_session_warns():
    frames = bin_events(make_events([0], [0], [0], [1]), duration_ms=10)
    s = Session("short", frames, LabelTrack(1000.0, np.zeros(10), np.zeros(10), np.zeros(10)))
    with pytest.warns(UserWarning):
        assert list(session_to_tensors(s, window_ms=450)) == []
