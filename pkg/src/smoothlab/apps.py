"""Application presets: parameter overrides plus guidance-map modifications."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .energy import EnergyParams
from .guidance import (BinaryMask, GuidanceMap, detect_important_edges, detect_texture,
                       edge_response, mask_guidance)
from .imagecore import as_array

PRESET_IDS = ("flatten", "abstract", "detail", "texture", "content_bg", "content_fg")


@dataclass(frozen=True)
class GuidancePipeline:
    """How the training-time guidance E(I), the mask B and pair-weight scales are built.

    ``saliency`` is "background" (zero responses outside the salient
    object) or "foreground" (zero them inside); the untouched region gets
    its flattening weights multiplied by ``keep_weight``.
    """

    edge_high: float = 0.9
    edge_low: float = 0.5
    edge_min_len: int = 10
    zero_texture: bool = False
    texture_window: int = 7
    texture_density: float = 0.5
    texture_max_len: int = 30
    texture_edge_threshold: float = 0.1
    saliency: str | None = None
    keep_weight: float = 0.0

    @property
    def needs_saliency(self) -> bool:
        return self.saliency is not None

    def to_dict(self) -> dict:
        return asdict(self)


_OVERRIDES = {
    "flatten": {},
    "abstract": {"large_dilation": 3},
    "detail": {"alpha": 15.0, "c1": math.inf, "c2": 0.0},
    "texture": {"alpha": 20.0, "h": 5},
    "content_bg": {"h": 5},
    "content_fg": {"h": 5},
}

_PIPELINES = {
    "flatten": GuidancePipeline(),
    "abstract": GuidancePipeline(),
    "detail": GuidancePipeline(),
    "texture": GuidancePipeline(zero_texture=True),
    "content_bg": GuidancePipeline(saliency="background"),
    "content_fg": GuidancePipeline(saliency="foreground"),
}


def normalize_preset_id(preset_id: str) -> str:
    key = str(preset_id).strip().lower()
    if key not in PRESET_IDS:
        raise ValueError(f"unknown preset {preset_id!r}; expected one of {', '.join(PRESET_IDS)}")
    return key


def resolve_preset(preset_id: str, base: EnergyParams | None = None):
    """(EnergyParams, GuidancePipeline) for a preset id."""
    key = normalize_preset_id(preset_id)
    base = EnergyParams() if base is None else base
    return base.replace(**_OVERRIDES[key]), _PIPELINES[key]


def preset_overrides(preset_id: str) -> dict:
    return dict(_OVERRIDES[normalize_preset_id(preset_id)])


def preset_json(preset_id: str) -> str:
    params, pipe = resolve_preset(preset_id)
    doc = {"preset": normalize_preset_id(preset_id), "energy": params.to_dict(), "guidance": pipe.to_dict()}
    return json.dumps(doc, indent=2, sort_keys=True, default=str)


@dataclass(frozen=True)
class Targets:
    """Training-time inputs of one image: modified guidance, B, pair-weight scales."""

    guide: GuidanceMap
    B: BinaryMask
    weight_map: np.ndarray | None
    texture: BinaryMask | None = None


def apply_pipeline(pipe: GuidancePipeline, img, saliency: BinaryMask | None = None,
                   neighborhood: int = 4) -> Targets:
    arr = as_array(img)
    raw = edge_response(arr, neighborhood)
    B = detect_important_edges(raw, pipe.edge_high, pipe.edge_low, pipe.edge_min_len)
    guide = raw
    texture = None
    weight_map = None
    if pipe.zero_texture:
        texture = detect_texture(raw, pipe.texture_window, pipe.texture_density,
                                 pipe.texture_max_len, pipe.texture_edge_threshold)
        guide = mask_guidance(guide, texture)
    if pipe.saliency is not None:
        if saliency is None:
            raise ValueError("this preset needs a saliency mask")
        if saliency.shape != raw.shape:
            raise ValueError("saliency mask does not match image size")
        fg = saliency.bits
        masked = ~fg if pipe.saliency == "background" else fg
        guide = mask_guidance(guide, BinaryMask(masked))
        weight_map = np.where(masked, 1.0, pipe.keep_weight)
    return Targets(guide, B, weight_map, texture)


def detail_magnify(I, T, k: float):
    """T + k * (I - T); not clamped here."""
    from .imagecore import Image

    i_arr = as_array(I)
    t_arr = as_array(T)
    if i_arr.shape != t_arr.shape:
        raise ValueError("I and T differ in shape")
    if k < 0:
        raise ValueError("enhancement factor must be >= 0")
    return Image(t_arr + k * (i_arr - t_arr), unclamped=True)
