import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vdit_lab.errors import BoundsError, NotApplicableError, ShapeError
from vdit_lab.layout import (
    TokenLayout, block_average, flatten_index, frame_offset_mass, read_ppm, render_heatmap, structure_report,
    text_attention_share, write_ppm,
)

from tests.oracle import brute_band_mass, brute_text_share, coords


def random_stochastic(rng, n):
    m = rng.random((n, n)) ** 3
    return m / m.sum(axis=1, keepdims=True)


def test_flatten_examples():
    assert flatten_index(TokenLayout(4, 2, 3, 2, "suffix"), 0, 0, 0) == 0
    assert flatten_index(TokenLayout(4, 2, 3, 0, "suffix"), 2, 1, 2) == 17
    assert flatten_index(TokenLayout(4, 2, 3, 5, "prefix"), 2, 1, 2) == 22
    with pytest.raises(BoundsError):
        flatten_index(TokenLayout(4, 2, 3), 4, 0, 0)
    with pytest.raises(BoundsError):
        TokenLayout(2, 2, 2).unflatten(8)


def test_round_trip_exhaustive():
    sizes = [1, 2, 3, 8]
    for F, H, W, T in itertools.product(sizes, sizes, sizes, [0, 1, 8]):
        for pos in ("prefix", "suffix"):
            lay = TokenLayout(F, H, W, T, pos)
            assert lay.n == F * H * W + T
            seen = set()
            for f, r, c in itertools.product(range(F), range(H), range(W)):
                i = lay.flatten(f, r, c)
                assert lay.unflatten(i) == ("vision", (f, r, c))
                seen.add(i)
            for t in range(T):
                i = lay.text_index(t)
                assert lay.unflatten(i) == ("text", (t,))
                seen.add(i)
            assert seen == set(range(lay.n))


def test_unflatten_matches_walk():
    lay = TokenLayout(3, 2, 2, 3, "prefix")
    for i in range(lay.n):
        kind, c = lay.unflatten(i)
        assert (kind, *c) == coords(i, 3, 2, 2, 3, True)


def test_band_mass_examples():
    band, text = frame_offset_mass(np.eye(12), TokenLayout(3, 2, 2))
    assert band == {0: 1.0, 1: 0.0, 2: 0.0} and text == 0.0
    band, _ = frame_offset_mass(np.full((4, 4), 0.25), TokenLayout(2, 1, 2))
    assert band[0] == pytest.approx(0.5) and band[1] == pytest.approx(0.5)
    with pytest.raises(ShapeError):
        frame_offset_mass(np.eye(5), TokenLayout(2, 1, 2))


@pytest.mark.parametrize("T,pos", [(0, "suffix"), (2, "suffix"), (3, "prefix")])
def test_band_mass_brute_force(T, pos):
    rng = np.random.default_rng(T)
    lay = TokenLayout(3, 1, 2, T, pos)
    m = random_stochastic(rng, lay.n)
    band, text = frame_offset_mass(m, lay)
    ref_band, ref_text = brute_band_mass(m, 3, 1, 2, T, pos == "prefix")
    assert max(abs(band[d] - ref_band[d]) for d in range(3)) < 1e-6
    assert abs(text - ref_text) < 1e-6


def test_text_share_examples():
    lay = TokenLayout(2, 2, 2, 3)
    m = np.zeros((lay.n, lay.n))
    m[:, lay.text_index(0)] = 0.1
    m[:, 0] += 0.9
    share, dom = text_attention_share(m, lay)
    assert dom == 1.0 and share[0] == pytest.approx(0.1)
    lay4 = TokenLayout(2, 2, 2, 4)
    _, dom = text_attention_share(np.full((lay4.n, lay4.n), 1 / lay4.n), lay4)
    assert dom == pytest.approx(0.25)
    with pytest.raises(NotApplicableError):
        text_attention_share(np.eye(8), TokenLayout(2, 2, 2))


@pytest.mark.parametrize("pos", ["prefix", "suffix"])
def test_text_share_brute_force(pos):
    rng = np.random.default_rng(5)
    lay = TokenLayout(2, 2, 2, 3, pos)
    m = random_stochastic(rng, lay.n)
    share, dom = text_attention_share(m, lay)
    ref, ref_dom = brute_text_share(m, 2, 2, 2, 3, pos == "prefix")
    assert np.abs(np.array(share) - ref).max() < 1e-6 and abs(dom - ref_dom) < 1e-6


@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 3),
       st.sampled_from(["prefix", "suffix"]), st.integers(0, 2**31 - 1))
def test_property_mass_conservation(F, H, W, T, pos, seed):
    lay = TokenLayout(F, H, W, T, pos)
    m = random_stochastic(np.random.default_rng(seed), lay.n)
    rep = structure_report(m, lay)
    assert all(v >= 0 for v in rep.band_mass.values())
    assert abs(sum(rep.band_mass.values()) + rep.text_mass - 1) < 1e-5
    if T:
        assert 0 <= rep.first_token_dominance <= 1


def test_locality_strictly_decreasing():
    lay = TokenLayout(5, 2, 2)
    f = lay.frame_of()
    logits = -np.abs(f[:, None] - f[None, :]).astype(float)
    m = np.exp(logits)
    m /= m.sum(axis=1, keepdims=True)
    band, _ = frame_offset_mass(m, lay)
    assert all(band[d] > band[d + 1] for d in range(4))


def test_heatmaps(tmp_path):
    img = render_heatmap(np.eye(6))
    assert img.dtype == np.uint8 and np.all(np.diag(img) == 255) and img[0, 1] == 0
    m = np.arange(16, dtype=float).reshape(4, 4)
    np.testing.assert_array_equal(block_average(m, 2), [[2.5, 4.5], [10.5, 12.5]])
    u = render_heatmap(np.full((8, 8), 1 / 8), downsample=2)
    assert u.shape == (4, 4) and np.all(u == u[0, 0])
    p = write_ppm(tmp_path / "a.ppm", img)
    assert p.read_bytes().startswith(b"P6\n6 6\n255\n")
    np.testing.assert_array_equal(read_ppm(p)[:, :, 0], img)
    write_ppm(tmp_path / "b.ppm", render_heatmap(np.eye(6)))
    assert (tmp_path / "b.ppm").read_bytes() == p.read_bytes()
