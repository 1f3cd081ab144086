import json
import math

import numpy as np
import pytest

from smoothlab.apps import (PRESET_IDS, apply_pipeline, detail_magnify, preset_json, resolve_preset)
from smoothlab.energy import EnergyParams
from smoothlab.guidance import BinaryMask, detect_texture, edge_response, mask_guidance
from smoothlab.imagecore import Image, make_rng
from smoothlab.synthetic import checkerboard, piecewise_scene

# field values quoted for each preset; everything else must stay at the defaults
TABLE = {
    "flatten": {"alpha": 5.0, "c1": 20.0, "c2": 10.0, "h": 21, "large_dilation": 0},
    "abstract": {"alpha": 5.0, "c1": 20.0, "c2": 10.0, "h": 21, "large_dilation": 3},
    "detail": {"alpha": 15.0, "c1": math.inf, "c2": 0.0, "h": 21, "large_dilation": 0},
    "texture": {"alpha": 20.0, "c1": 20.0, "c2": 10.0, "h": 5, "large_dilation": 0},
    "content_bg": {"alpha": 5.0, "c1": 20.0, "c2": 10.0, "h": 5, "large_dilation": 0},
    "content_fg": {"alpha": 5.0, "c1": 20.0, "c2": 10.0, "h": 5, "large_dilation": 0},
}


@pytest.mark.parametrize("preset", PRESET_IDS)
def test_preset_table(preset):
    params, _ = resolve_preset(preset)
    expected = EnergyParams().to_dict()
    expected.update(TABLE[preset])
    assert params.to_dict() == expected


def test_flatten_is_pure_defaults_and_unknown_rejected():
    assert resolve_preset("FLATTEN")[0] == EnergyParams()
    with pytest.raises(ValueError):
        resolve_preset("sketch")


def test_preset_json_is_auditable():
    doc = json.loads(preset_json("detail"))
    assert doc["energy"]["alpha"] == 15.0 and doc["preset"] == "detail"


def test_texture_pipeline_zeroes_texture_pixels_exactly():
    img = checkerboard(24, 24, cell=2)
    params, pipe = resolve_preset("texture")
    t = apply_pipeline(pipe, img)
    raw = edge_response(img)
    tex = detect_texture(raw)
    assert tex.count > 0
    assert np.array_equal(t.guide.response, mask_guidance(raw, tex).response)


@pytest.mark.parametrize("preset,zero_fg", [("content_bg", False), ("content_fg", True)])
def test_content_presets_mask_guidance(preset, zero_fg):
    img = piecewise_scene(16, 16, make_rng(1))
    fg = np.zeros((16, 16), bool)
    fg[4:12, 4:12] = True
    _, pipe = resolve_preset(preset)
    t = apply_pipeline(pipe, img, BinaryMask(fg))
    masked = fg if zero_fg else ~fg
    assert not t.guide.response[masked].any()
    assert np.array_equal(t.guide.response[~masked], edge_response(img).response[~masked])
    assert np.array_equal(t.weight_map, np.where(masked, 1.0, 0.0))
    with pytest.raises(ValueError):
        apply_pipeline(pipe, img, None)


def test_detail_magnify():
    rng = make_rng(2)
    I = Image(rng.random((3, 4, 4)))
    T = Image(rng.random((3, 4, 4)))
    assert np.allclose(detail_magnify(I, T, 1).data, I.data, atol=1e-15)
    assert np.array_equal(detail_magnify(I, T, 0).data, T.data)
    one_i = Image(np.full((1, 1, 1), 0.52))
    one_t = Image(np.full((1, 1, 1), 0.5))
    assert math.isclose(detail_magnify(one_i, one_t, 3).data[0, 0, 0], 0.56, rel_tol=1e-12)
    a, b, c = (detail_magnify(I, T, k).data for k in (0.5, 1.5, 2.5))
    assert np.allclose(b - a, c - b, atol=1e-14)
    with pytest.raises(ValueError):
        detail_magnify(I, Image(np.zeros((3, 2, 2))), 1)
    with pytest.raises(ValueError):
        detail_magnify(I, T, -1)
