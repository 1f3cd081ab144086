import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from smoothlab.guidance import (BinaryMask, GuidanceMap, detect_important_edges, detect_texture,
                                dilate_mask, edge_response, load_mask, local_density, mask_guidance,
                                save_mask)
from smoothlab.imagecore import Image, make_rng
from smoothlab.synthetic import checkerboard, step_edge


def test_constant_image_has_zero_response():
    assert not edge_response(Image(np.full((3, 5, 5), 0.3))).response.any()


def test_two_pixel_response():
    assert edge_response(Image(np.array([[[0.0, 1.0]]]))).response.tolist() == [[1.0, 1.0]]


def test_channel_sum_cancels_inside_abs():
    img = np.zeros((3, 1, 2))
    img[:, 0, 0] = [0.5, 0.5, 0.5]
    img[:, 0, 1] = [0.6, 0.4, 0.5]
    assert np.allclose(edge_response(Image(img)).response, 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.sampled_from([4, 8]), st.integers(0, 2**31))
def test_response_matches_loop_oracle(h, w, nbhd, seed):
    img = make_rng(seed).random((3, h, w))
    got = edge_response(img, nbhd).response
    assert np.allclose(got, oracles.edge_response(img, nbhd), atol=1e-12)
    assert (got >= 0).all() and got.shape == (h, w)


def test_guidance_map_invariants():
    with pytest.raises(ValueError):
        GuidanceMap(np.array([[-1.0]]))
    mask = BinaryMask(np.eye(4))
    assert mask.count == 4 == np.count_nonzero(mask.bits)


def test_important_edges_constant_image():
    g = edge_response(Image(np.full((3, 8, 8), 0.5)))
    assert detect_important_edges(g).count == 0


def test_important_edges_keep_long_step():
    g = edge_response(step_edge(32))
    B = detect_important_edges(g, high=0.9, low=0.5, min_len=10)
    assert B.bits[:, 15].all() and B.bits[:, 16].all()
    assert B.count == 64


def test_short_blip_removed_per_component_oracle():
    img = np.zeros((1, 12, 12))
    img[0, 5, 5:7] = 1.0
    g = edge_response(img)
    B = detect_important_edges(g, high=0.9, low=0.5, min_len=5)
    comps = oracles.components((g.response >= 0.5).tolist())
    expected = np.zeros((12, 12), bool)
    for comp in comps:
        if len(comp) >= 5 and any(g.response[y, x] >= 0.9 for y, x in comp):
            for y, x in comp:
                expected[y, x] = True
    assert np.array_equal(B.bits, expected)
    # the blip itself (2 pixels plus its 6 lit neighbours) is one component of size 8
    assert not detect_important_edges(g, 0.9, 0.5, min_len=9).bits.any()


def test_texture_checkerboard_and_contour():
    assert detect_texture(edge_response(Image(np.zeros((3, 16, 16))))).count == 0
    board = checkerboard(32, 32, cell=2)
    g = edge_response(board)
    edges = g.response >= 0.1
    assert np.array_equal(detect_texture(g).bits, edges)
    # density oracle: every edge pixel of the board sits in a dense window
    assert (local_density(edges, 7)[edges] > 0.5).all()
    contour = edge_response(step_edge(48))
    assert detect_texture(contour).count == 0


def test_mask_guidance():
    g = GuidanceMap(make_rng(0).random((4, 6)))
    assert np.array_equal(mask_guidance(g, BinaryMask.empty(4, 6)).response, g.response)
    assert not mask_guidance(g, BinaryMask(np.ones((4, 6)))).response.any()
    left = np.zeros((4, 6), bool)
    left[:, :3] = True
    out = mask_guidance(g, BinaryMask(left)).response
    assert not out[:, :3].any() and np.array_equal(out[:, 3:], g.response[:, 3:])
    with pytest.raises(ValueError):
        mask_guidance(g, BinaryMask.empty(3, 6))


def test_dilate():
    m = BinaryMask(make_rng(1).random((9, 9)) > 0.8)
    assert dilate_mask(m, 0) is m
    one = np.zeros((11, 11), bool)
    one[5, 5] = True
    d = dilate_mask(BinaryMask(one), 3).bits
    assert d.sum() == 49 and d[2:9, 2:9].all()
    assert (dilate_mask(m, 2).bits | m.bits).sum() == dilate_mask(m, 2).bits.sum()


def test_mask_file_round_trip(tmp_path):
    m = BinaryMask(make_rng(2).random((5, 7)) > 0.5)
    save_mask(m, tmp_path / "m.png")
    assert np.array_equal(load_mask(tmp_path / "m.png").bits, m.bits)
