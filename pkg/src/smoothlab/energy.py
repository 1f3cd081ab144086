"""Smoothing objective: data + lambda_f * flattening + lambda_e * edge terms.

Conventions
-----------
* Images are planar (C, H, W) arrays in [0, 1].
* Edge responses are computed in unit scale; the p-selection thresholds
  ``c1``/``c2`` are given in 8-bit units, so responses are multiplied by
  ``response_scale`` (255) before being compared.
* The flattening term runs over ordered pairs (i, j) with j in the h x h
  window of i (clipped at borders), per channel, with |d|^p smoothed as
  (d^2 + eps^2)^(p/2) - eps^p.
* The edge term uses raw |.|; its gradient uses sign(d), the exact
  derivative away from d = 0 and the zero subgradient at d = 0.
* A p-map is a boolean (H, W) array, True where the large exponent
  (with spatial weights scaled by alpha) applies.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .guidance import (NEIGHBOR_OFFSETS, BinaryMask, GuidanceMap, dilate_mask,
                       edge_response, shifted_pairs)
from .imagecore import as_array, rgb_to_yuv

LARGE = True
SMALL = False

# per-offset color weights are cached below this many floats
_CACHE_LIMIT = 30_000_000


@dataclass(frozen=True)
class EnergyParams:
    lambda_f: float = 1.0
    lambda_e: float = 0.1
    sigma_r: float = 0.1
    sigma_s: float = 7.0
    alpha: float = 5.0
    c1: float = 20.0
    c2: float = 10.0
    h: int = 21
    p_large: float = 2.0
    p_small: float = 0.8
    eps: float = 1e-4
    response_scale: float = 255.0
    neighborhood: int = 4
    large_dilation: int = 0

    def __post_init__(self):
        for name in ("lambda_f", "lambda_e", "alpha", "sigma_r", "sigma_s", "eps", "response_scale"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be a positive finite number, got {value!r}")
        if int(self.h) != self.h or self.h < 3 or self.h % 2 != 1:
            raise ValueError(f"h must be an odd integer >= 3, got {self.h!r}")
        if not (0 < self.p_small <= 1 < self.p_large <= 2):
            raise ValueError("need 0 < p_small <= 1 < p_large <= 2")
        if self.c1 < 0 or self.c2 < 0 or math.isnan(self.c1) or math.isnan(self.c2):
            raise ValueError("c1 and c2 must be >= 0")
        if self.neighborhood not in NEIGHBOR_OFFSETS:
            raise ValueError("neighborhood must be 4 or 8")
        if self.large_dilation < 0:
            raise ValueError("large_dilation must be >= 0")

    def replace(self, **changes) -> "EnergyParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class EnergyBreakdown:
    data: float
    flatten: float
    edge: float
    total: float

    CSV_HEADER = "iter,total,data,flatten,edge"

    def csv_row(self, iteration: int) -> str:
        return f"{iteration},{self.total!r},{self.data!r},{self.flatten!r},{self.edge!r}"


def compose(data: float, flatten: float, edge: float, params: EnergyParams) -> EnergyBreakdown:
    total = data + params.lambda_f * flatten + params.lambda_e * edge
    return EnergyBreakdown(float(data), float(flatten), float(edge), float(total))


# -- pair weights ----------------------------------------------------------------

def color_weight(I_yuv, i, j, sigma_r: float) -> float:
    """exp(-sum_c (I_ic - I_jc)^2 / (2 sigma_r^2)) for pixels i=(y,x), j=(y,x)."""
    arr = as_array(I_yuv)
    diff = arr[:, i[0], i[1]] - arr[:, j[0], j[1]]
    return float(np.exp(-np.dot(diff, diff) / (2.0 * sigma_r ** 2)))


def spatial_weight(i, j, sigma_s: float) -> float:
    dy = i[0] - j[0]
    dx = i[1] - j[1]
    return float(np.exp(-(dy * dy + dx * dx) / (2.0 * sigma_s ** 2)))


def window_offsets(h: int):
    r = h // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]


# -- p selection -------------------------------------------------------------------

def _response(g) -> np.ndarray:
    return g.response if isinstance(g, GuidanceMap) else np.asarray(g, dtype=np.float64)


def select_p(E_I, E_T, params: EnergyParams) -> np.ndarray:
    """LARGE where E_I < c1 and E_T - E_I > c2, compared as given."""
    e_i = _response(E_I)
    e_t = _response(E_T)
    if e_i.shape != e_t.shape:
        raise ValueError("guidance maps differ in size")
    return (e_i < params.c1) & ((e_t - e_i) > params.c2)


def half_half_pmap(height: int, width: int) -> np.ndarray:
    """Left half (x < width // 2) LARGE, right half SMALL."""
    pmap = np.zeros((height, width), dtype=bool)
    pmap[:, : width // 2] = LARGE
    return pmap


# -- the objective -------------------------------------------------------------------

class EnergyProblem:
    """The objective for one input image, with its pair weights precomputed.

    ``guide_I`` defaults to the raw edge response of ``I``; pass a masked map
    for texture/saliency presets. ``weight_map`` scales the flattening pair
    weights of pixel i (content-aware presets); ``None`` means all ones.
    """

    def __init__(self, I, B: BinaryMask | None = None, guide_I: GuidanceMap | None = None,
                 params: EnergyParams = EnergyParams(), weight_map=None):
        self.I = np.array(as_array(I), dtype=np.float64)
        self.params = params
        c, h, w = self.I.shape
        self.shape = (c, h, w)
        self.N = h * w
        self.B = np.zeros((h, w), dtype=bool) if B is None else np.asarray(B.bits if isinstance(B, BinaryMask) else B, dtype=bool)
        if self.B.shape != (h, w):
            raise ValueError("B does not match image size")
        self.Ne = int(np.count_nonzero(self.B))
        if guide_I is None:
            guide_I = edge_response(self.I, params.neighborhood)
        self.E_I = _response(guide_I)
        if self.E_I.shape != (h, w):
            raise ValueError("guidance map does not match image size")
        self.weight_map = None if weight_map is None else np.asarray(weight_map, dtype=np.float64)
        if self.weight_map is not None and self.weight_map.shape != (h, w):
            raise ValueError("weight map does not match image size")

        yuv = rgb_to_yuv(self.I).data if c == 3 else self.I
        self._yuv = yuv
        self._pairs = []
        for dy, dx in window_offsets(params.h):
            if abs(dy) >= h or abs(dx) >= w:
                continue
            src, dst = shifted_pairs((h, w), dy, dx)
            ws = math.exp(-(dy * dy + dx * dx) / (2.0 * params.sigma_s ** 2))
            self._pairs.append((dy, dx, src, dst, ws))
        self._cache_wr = len(self._pairs) * self.N <= _CACHE_LIMIT
        self._wr = [self._color(src, dst) for _, _, src, dst, _ in self._pairs] if self._cache_wr else None

    # weights

    def _color(self, src, dst) -> np.ndarray:
        diff = self._yuv[(slice(None),) + src] - self._yuv[(slice(None),) + dst]
        return np.exp(-np.einsum("chw,chw->hw", diff, diff) / (2.0 * self.params.sigma_r ** 2))

    def _pair_weights(self, k: int, pmap: np.ndarray):
        _, _, src, dst, ws = self._pairs[k]
        wr = self._wr[k] if self._cache_wr else self._color(src, dst)
        large = pmap[src]
        w = np.where(large, self.params.alpha * ws, wr)
        if self.weight_map is not None:
            w = w * self.weight_map[src]
        p = np.where(large, self.params.p_large, self.params.p_small)
        return src, dst, w, p

    # p-map

    def pmap(self, T) -> np.ndarray:
        """Dynamic p-map for output T (raw responses, 8-bit scale)."""
        T = as_array(T)
        s = self.params.response_scale
        e_t = edge_response(T, self.params.neighborhood).response
        pmap = select_p(s * self.E_I, s * e_t, self.params)
        if self.params.large_dilation:
            pmap = dilate_mask(BinaryMask(pmap), self.params.large_dilation).bits
        return pmap

    def resolve_pmap(self, T, pmap) -> np.ndarray:
        if pmap is None:
            return self.pmap(T)
        pmap = np.asarray(pmap, dtype=bool)
        if pmap.shape != self.shape[1:]:
            raise ValueError("p-map does not match image size")
        return pmap

    # terms

    def data(self, T) -> float:
        d = as_array(T) - self.I
        return float(np.sum(d * d) / self.N)

    def flatten(self, T, pmap) -> float:
        T = as_array(T)
        eps = self.params.eps
        acc = np.zeros(self.shape[1:])
        for k in range(len(self._pairs)):
            src, dst, w, p = self._pair_weights(k, pmap)
            d = T[(slice(None),) + src] - T[(slice(None),) + dst]
            u = d * d + eps * eps
            phi = u ** (p / 2.0) - eps ** p
            acc[src] += w * phi.sum(axis=0)
        return float(acc.sum() / self.N)

    def edge_residual(self, T) -> np.ndarray:
        e_t = edge_response(T, self.params.neighborhood).response
        return np.where(self.B, e_t - self.E_I, 0.0)

    def edge(self, T) -> float:
        if self.Ne == 0:
            return 0.0
        r = self.edge_residual(as_array(T))
        return float(np.sum(r * r) / self.Ne)

    def breakdown(self, T, pmap=None) -> EnergyBreakdown:
        T = as_array(T)
        if T.shape != self.shape:
            raise ValueError(f"T has shape {T.shape}, expected {self.shape}")
        pmap = self.resolve_pmap(T, pmap)
        return compose(self.data(T), self.flatten(T, pmap), self.edge(T), self.params)

    # gradients

    def flatten_gradient(self, T, pmap) -> np.ndarray:
        T = as_array(T)
        eps = self.params.eps
        grad = np.zeros(self.shape)
        for k in range(len(self._pairs)):
            src, dst, w, p = self._pair_weights(k, pmap)
            s_idx = (slice(None),) + src
            d_idx = (slice(None),) + dst
            d = T[s_idx] - T[d_idx]
            u = d * d + eps * eps
            g = (w * p) * d * u ** (p / 2.0 - 1.0)
            grad[s_idx] += g
            grad[d_idx] -= g
        return grad / self.N

    def edge_gradient(self, T) -> np.ndarray:
        T = as_array(T)
        grad_s = np.zeros(self.shape[1:])
        if self.Ne == 0:
            return np.zeros(self.shape)
        r = 2.0 * self.edge_residual(T) / self.Ne
        s = T.sum(axis=0)
        for dy, dx in NEIGHBOR_OFFSETS[self.params.neighborhood]:
            src, dst = shifted_pairs(s.shape, dy, dx)
            g = r[src] * np.sign(s[src] - s[dst])
            grad_s[src] += g
            grad_s[dst] -= g
        return np.broadcast_to(grad_s, self.shape).copy()

    def value_and_gradient(self, T, pmap=None) -> tuple[EnergyBreakdown, np.ndarray]:
        """Breakdown and gradient in one sweep over the window offsets."""
        T = as_array(T)
        pmap = self.resolve_pmap(T, pmap)
        p = self.params
        eps = p.eps
        acc = np.zeros(self.shape[1:])
        gflat = np.zeros(self.shape)
        for k in range(len(self._pairs)):
            src, dst, w, pk = self._pair_weights(k, pmap)
            s_idx = (slice(None),) + src
            d_idx = (slice(None),) + dst
            d = T[s_idx] - T[d_idx]
            u = d * d + eps * eps
            half = u ** (pk / 2.0 - 1.0)
            acc[src] += w * (u * half - eps ** pk).sum(axis=0)
            g = (w * pk) * d * half
            gflat[s_idx] += g
            gflat[d_idx] -= g
        diff = T - self.I
        bd = compose(float(np.sum(diff * diff) / self.N), float(acc.sum() / self.N), self.edge(T), p)
        grad = 2.0 * diff / self.N + p.lambda_f * gflat / self.N
        if self.Ne:
            grad += p.lambda_e * self.edge_gradient(T)
        return bd, grad

    def gradient(self, T, pmap=None) -> np.ndarray:
        """dE/dT with the p-map held fixed (computed from T when not given)."""
        T = as_array(T)
        pmap = self.resolve_pmap(T, pmap)
        p = self.params
        grad = 2.0 * (T - self.I) / self.N
        grad += p.lambda_f * self.flatten_gradient(T, pmap)
        if self.Ne:
            grad += p.lambda_e * self.edge_gradient(T)
        return grad


# -- functional surface --------------------------------------------------------------

def data_term(T, I) -> float:
    T = as_array(T)
    I = as_array(I)
    if T.shape != I.shape:
        raise ValueError("T and I differ in shape")
    d = T - I
    return float(np.sum(d * d) / (T.shape[1] * T.shape[2]))


def flatten_term(T, I, pmap, params: EnergyParams = EnergyParams(), weight_map=None) -> float:
    prob = EnergyProblem(I, params=params, weight_map=weight_map)
    return prob.flatten(T, prob.resolve_pmap(T, pmap))


def edge_term(T, I, B: BinaryMask, guide_I: GuidanceMap | None = None,
              neighborhood: int = 4) -> float:
    """(1/N_e) sum_i B_i (E_i(T) - E_i(I))^2; zero when B is empty."""
    T = as_array(T)
    if B.count == 0:
        return 0.0
    e_i = edge_response(I, neighborhood).response if guide_I is None else _response(guide_I)
    e_t = edge_response(T, neighborhood).response
    r = np.where(B.bits, e_t - e_i, 0.0)
    return float(np.sum(r * r) / B.count)


def total_energy(T, I, B: BinaryMask | None = None, guide_I: GuidanceMap | None = None,
                 params: EnergyParams = EnergyParams(), pmap=None, weight_map=None) -> EnergyBreakdown:
    """Full objective; the p-map is derived from T unless one is supplied."""
    prob = EnergyProblem(I, B, guide_I, params, weight_map)
    return prob.breakdown(T, pmap)


def energy_gradient(T, I, B: BinaryMask | None = None, guide_I: GuidanceMap | None = None,
                    params: EnergyParams = EnergyParams(), pmap=None, weight_map=None) -> np.ndarray:
    prob = EnergyProblem(I, B, guide_I, params, weight_map)
    return prob.gradient(T, pmap)
