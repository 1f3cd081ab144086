"""Per-image minimizers: Adam gradient descent and IRLS with conjugate gradient.

IRLS minimizes data + lambda_f * flattening on a fixed p-map. Each outer
iteration replaces (d^2 + eps^2)^(p/2) by its tangent quadratic in d^2,
which bounds it from above for p <= 2, and solves the resulting
(Id + lambda_f L) T = I system channel by channel with Jacobi-preconditioned
CG. The edge term is not majorizable this way and is left out.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .energy import EnergyBreakdown, EnergyParams, EnergyProblem, compose, half_half_pmap
from .imagecore import as_array
from .optim import Adam

P_MODES = ("dynamic", "all_large", "all_small", "half_half", "frozen")


class SolverError(RuntimeError):
    def __init__(self, message, trace=None, residual=None):
        super().__init__(message)
        self.trace = trace
        self.residual = residual


@dataclass(frozen=True)
class GdConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    iterations: int = 100
    pmap_refresh: int = 1
    p_mode: str = "dynamic"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.iterations < 0 or self.pmap_refresh < 1:
            raise ValueError("iterations >= 0 and pmap_refresh >= 1 required")
        if self.p_mode not in P_MODES:
            raise ValueError(f"p_mode must be one of {P_MODES}")


@dataclass(frozen=True)
class IrlsConfig:
    outer_iterations: int = 10
    cg_tolerance: float = 1e-6
    cg_max_iters: int = 2000
    p_mode: str = "all_small"

    def __post_init__(self):
        if not (self.cg_tolerance > 0 and self.cg_max_iters > 0 and self.outer_iterations >= 0):
            raise ValueError("tolerances and iteration counts must be positive")
        if self.p_mode not in P_MODES:
            raise ValueError(f"p_mode must be one of {P_MODES}")
        if self.p_mode == "dynamic":
            raise ValueError("IRLS needs a fixed p-map; p_mode 'dynamic' is not supported")


@dataclass
class SolveTrace:
    """Energy after each iteration; ``initial`` is the energy of the start point."""

    initial: EnergyBreakdown | None = None
    records: list[EnergyBreakdown] = field(default_factory=list)
    ms: list[float] = field(default_factory=list)
    flips: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def final(self) -> EnergyBreakdown:
        return self.records[-1] if self.records else self.initial

    def to_csv(self) -> str:
        lines = [EnergyBreakdown.CSV_HEADER + ",ms"]
        if self.initial is not None:
            lines.append(self.initial.csv_row(0) + ",0.0")
        for k, (bd, ms) in enumerate(zip(self.records, self.ms), start=1):
            lines.append(f"{bd.csv_row(k)},{ms!r}")
        return "\n".join(lines) + "\n"


def fixed_pmap(mode: str, height: int, width: int, frozen=None) -> np.ndarray:
    if mode == "all_large":
        return np.ones((height, width), dtype=bool)
    if mode == "all_small":
        return np.zeros((height, width), dtype=bool)
    if mode == "half_half":
        return half_half_pmap(height, width)
    if mode == "frozen":
        if frozen is None:
            raise ValueError("p_mode 'frozen' needs a p-map")
        frozen = np.asarray(frozen, dtype=bool)
        if frozen.shape != (height, width):
            raise ValueError("frozen p-map does not match image size")
        return frozen
    raise ValueError(f"no fixed p-map for mode {mode!r}")


def _check_finite(bd: EnergyBreakdown, trace: SolveTrace):
    if not np.isfinite(bd.total):
        raise SolverError(f"non-finite energy after {len(trace)} iterations", trace=trace)


def solve_gd(I, B=None, guide_I=None, params: EnergyParams = EnergyParams(),
             cfg: GdConfig = GdConfig(), weight_map=None, pmap=None, problem=None):
    """Adam on T starting from T = I. Returns (T, SolveTrace).

    With ``p_mode='dynamic'`` the p-map is recomputed from T every
    ``pmap_refresh`` iterations; other modes keep it fixed.
    """
    prob = problem or EnergyProblem(I, B, guide_I, params, weight_map)
    T = prob.I.copy()
    _, h, w = prob.shape
    dynamic = cfg.p_mode == "dynamic"
    current = None if dynamic else fixed_pmap(cfg.p_mode, h, w, pmap)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2)
    trace = SolveTrace()
    prev = None
    elapsed_ms = 0.0
    for k in range(cfg.iterations + 1):
        t0 = time.perf_counter()
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                if dynamic and (current is None or k % cfg.pmap_refresh == 0):
                    current = prob.pmap(T)
                if k == cfg.iterations:
                    bd = prob.breakdown(T, current)
                else:
                    bd, grad = prob.value_and_gradient(T, current)
            except ValueError as exc:
                # overflowing iterates surface as invalid guidance maps
                raise SolverError(f"iterate diverged after {k} iterations: {exc}", trace=trace) from exc
        if k == 0:
            trace.initial = bd
        else:
            trace.records.append(bd)
            trace.ms.append(elapsed_ms + (time.perf_counter() - t0) * 1e3)
            trace.flips.append(float(np.mean(prev != current)))
        _check_finite(bd, trace)
        if k == cfg.iterations:
            break
        t0 = time.perf_counter()
        prev = current
        opt.step([T], [grad])
        elapsed_ms = (time.perf_counter() - t0) * 1e3
        if not np.all(np.isfinite(T)):
            raise SolverError(f"non-finite iterate after {k + 1} iterations", trace=trace)
    return T, trace


# -- IRLS ---------------------------------------------------------------------------

class _Surrogate:
    """Tangent quadratic of the flattening term around T0 (per channel)."""

    def __init__(self, prob: EnergyProblem, pmap: np.ndarray, T0: np.ndarray):
        self.prob = prob
        self.T0 = T0
        eps = prob.params.eps
        self.omega = []
        const = 0.0
        for k in range(len(prob._pairs)):
            src, dst, w, p = prob._pair_weights(k, pmap)
            d = T0[(slice(None),) + src] - T0[(slice(None),) + dst]
            u = d * d + eps * eps
            half = u ** (p / 2.0 - 1.0)
            # phi(d0) - omega * d0^2 is the constant part of the bound
            om = w * (p / 2.0) * half
            const += float(np.sum(w * (u * half - eps ** p) - om * d * d))
            self.omega.append((src, dst, om))
        self.const = const

    def quad(self, T) -> float:
        acc = 0.0
        for src, dst, om in self.omega:
            d = T[(slice(None),) + src] - T[(slice(None),) + dst]
            acc += float(np.sum(om * d * d))
        return acc

    def value(self, T) -> float:
        prob = self.prob
        return prob.data(T) + prob.params.lambda_f * (self.quad(T) + self.const) / prob.N

    def matvec(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x)
        for src, dst, om in self.omega:
            s_idx = (slice(None),) + src
            d_idx = (slice(None),) + dst
            g = om * (x[s_idx] - x[d_idx])
            out[s_idx] += g
            out[d_idx] -= g
        return x + self.prob.params.lambda_f * out

    def diagonal(self) -> np.ndarray:
        diag = np.zeros(self.prob.shape)
        for src, dst, om in self.omega:
            diag[(slice(None),) + src] += om
            diag[(slice(None),) + dst] += om
        return 1.0 + self.prob.params.lambda_f * diag


def conjugate_gradient(matvec, b, x0, diag, tol=1e-6, max_iters=2000):
    """Jacobi-preconditioned CG, run independently for each leading-axis slice.

    Stops a slice once ||r|| <= tol * ||b||. Raises SolverError if any
    slice is still above tolerance after ``max_iters``.
    """
    axes = tuple(range(1, b.ndim))
    x = x0.copy()
    r = b - matvec(x)
    z = r / diag
    p = z.copy()
    rz = np.sum(r * z, axis=axes)
    bnorm = np.sqrt(np.sum(b * b, axis=axes))
    target = tol * np.where(bnorm > 0, bnorm, 1.0)
    shape = (-1,) + (1,) * len(axes)
    for it in range(max_iters + 1):
        rnorm = np.sqrt(np.sum(r * r, axis=axes))
        active = rnorm > target
        if not active.any():
            return x, it
        if it == max_iters:
            break
        Ap = matvec(p)
        pAp = np.sum(p * Ap, axis=axes)
        a = np.where(active, rz / np.where(active, pAp, 1.0), 0.0).reshape(shape)
        x += a * p
        r -= a * Ap
        z = r / diag
        rz_new = np.sum(r * z, axis=axes)
        beta = np.where(active, rz_new / np.where(active, rz, 1.0), 0.0).reshape(shape)
        p = z + beta * p
        rz = rz_new
    raise SolverError(f"CG did not converge in {max_iters} iterations", residual=float(rnorm.max()))


def irls_weight(d, p: float, eps: float, w: float = 1.0):
    """Reweighting factor w * (p/2) * (d^2 + eps^2)^((p-2)/2)."""
    return w * (p / 2.0) * (np.asarray(d) ** 2 + eps * eps) ** ((p - 2.0) / 2.0)


def _irls_energy(prob: EnergyProblem, T, pmap) -> EnergyBreakdown:
    return compose(prob.data(T), prob.flatten(T, pmap), 0.0, prob.params)


def solve_irls(I, B_ignored=None, guide_I=None, params: EnergyParams = EnergyParams(),
               cfg: IrlsConfig = IrlsConfig(), weight_map=None, pmap=None, problem=None, callback=None):
    """IRLS on data + lambda_f * flattening with a fixed p-map. Returns (T, SolveTrace).

    ``callback(k, T_before, T_after)`` runs after each outer iteration k.
    """
    prob = problem or EnergyProblem(I, None, guide_I, params, weight_map)
    _, h, w = prob.shape
    fixed = fixed_pmap(cfg.p_mode, h, w, pmap)
    T = prob.I.copy()
    trace = SolveTrace(initial=_irls_energy(prob, T, fixed))
    for _ in range(cfg.outer_iterations):
        t0 = time.perf_counter()
        sur = _Surrogate(prob, fixed, T)
        try:
            T_new, _ = conjugate_gradient(sur.matvec, prob.I, T, sur.diagonal(),
                                          cfg.cg_tolerance, cfg.cg_max_iters)
        except SolverError as exc:
            exc.trace = trace
            raise
        T_prev, T = T, T_new
        bd = _irls_energy(prob, T, fixed)
        trace.records.append(bd)
        trace.ms.append((time.perf_counter() - t0) * 1e3)
        trace.flips.append(0.0)
        _check_finite(bd, trace)
        if callback is not None:
            callback(len(trace.records), T_prev, T)
    return T, trace


def majorizer_gap(T_current, T_candidate, I, params: EnergyParams = EnergyParams(), pmap=None,
                  guide_I=None, weight_map=None, problem=None) -> tuple[float, float]:
    """(surrogate, true energy) at T_candidate for the bound built at T_current.

    Energy here is data + lambda_f * flattening (no edge term), p-map fixed;
    ``pmap=None`` means all-small.
    """
    prob = problem or EnergyProblem(I, None, guide_I, params, weight_map)
    _, h, w = prob.shape
    pm = np.zeros((h, w), dtype=bool) if pmap is None else np.asarray(pmap, dtype=bool)
    T_current = as_array(T_current)
    T_candidate = as_array(T_candidate)
    sur = _Surrogate(prob, pm, T_current)
    return sur.value(T_candidate), _irls_energy(prob, T_candidate, pm).total
