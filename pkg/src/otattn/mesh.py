"""MESH: minimize the entropy of Sinkhorn by descending on the cost matrix.

The cost is perturbed with tiny Gaussian noise, then moved for a few
fixed-norm gradient steps that lower the entropy of its Sinkhorn plan.  The
final plan is a Sinkhorn solve on the moved cost.  By default the backward
pass treats the cost update as identity (straight-through).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ot import Marginals, ScalingVectors, SinkhornConfig, TransportPlan, entropy, sinkhorn

GRAD_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class MeshConfig:
    steps: int = 4
    lr: float = 1.0
    noise_std: float = 1e-3
    inner: SinkhornConfig = SinkhornConfig(max_iterations=5, tol=0.0)
    outer: SinkhornConfig = SinkhornConfig()
    warm_start: bool = True
    straight_through: bool = True
    alpha: float = 0.0
    similarity: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.similarity is not None:
            S = np.asarray(self.similarity, dtype=np.float64)
            if S.ndim < 2 or S.shape[-1] != S.shape[-2]:
                raise ValueError("similarity matrix must be square")
            if np.any(np.abs(S.sum(axis=-2) - 1.0) > 1e-9):
                raise ValueError("similarity matrix columns must sum to 1")

    def with_temperature(self, tau: float) -> "MeshConfig":
        return replace(self, inner=replace(self.inner, temperature=tau),
                       outer=replace(self.outer, temperature=tau))


@dataclass
class MeshTrace:
    entropies: list = field(default_factory=list)  # entropy of the inner plan at each step
    scalings: list = field(default_factory=list)
    costs: list = field(default_factory=list)  # C' entering each step
    plans: list = field(default_factory=list)  # inner (budgeted) plan at each step
    skipped: list = field(default_factory=list)  # instances whose step was skipped
    final_cost: Optional[np.ndarray] = None
    final_warm: Optional[ScalingVectors] = None


def _detached(marg: Marginals) -> Marginals:
    return Marginals(ad.detach(marg.a), ad.detach(marg.b))


def _objective(Cp: Tensor, marg: Marginals, cfg: MeshConfig, warm, reference):
    plan, sv = sinkhorn(Cp, marg, cfg.inner, warm)
    h = entropy(plan)
    obj = h
    if cfg.alpha > 0 and cfg.similarity is not None:
        # S mixes rows among similar slots; column-stochastic S keeps unit row mass
        diff = ad.matmul(ad.transpose(Tensor(cfg.similarity)), plan.values) - reference
        obj = obj + cfg.alpha * ad.reduce_sum(diff * diff, axis=(-2, -1))
    return obj, h, plan, sv


def _sample_noise(shape, cfg: MeshConfig, rng, noise):
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != tuple(shape):
            raise ValueError(f"noise shape {noise.shape} != cost shape {shape}")
        return noise
    if cfg.noise_std == 0:
        return np.zeros(shape)
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    return rng.normal(0.0, cfg.noise_std, size=shape)


def _normalized_step(g: np.ndarray, lr: float):
    norm = np.sqrt((g * g).sum(axis=(-2, -1), keepdims=True))
    if not np.all(np.isfinite(g)):
        bad = np.argwhere(~np.isfinite(g))[0]
        raise FloatingPointError(f"non-finite MESH gradient at index {tuple(bad)}")
    flat = norm <= GRAD_NORM_FLOOR
    step = np.where(flat, 0.0, lr * g / np.where(flat, 1.0, norm))
    return step, flat.reshape(flat.shape[:-2])


def mesh(C, marg: Marginals | None = None, cfg: MeshConfig | None = None, rng=None,
         noise=None, record: bool = False) -> tuple[Tensor, TransportPlan, MeshTrace]:
    """Run MESH on cost ``C`` (``(..., m, n)``).

    Returns the moved cost ``C'`` (tape-linked to ``C`` when ``C`` is), the
    final transport plan and a :class:`MeshTrace`.  ``noise`` overrides the
    sampled initial perturbation; ``record`` keeps per-step costs and plans.
    """
    cfg = cfg or MeshConfig()
    C = ad.as_tensor(C)
    m, n = C.shape[-2:]
    if marg is None:
        marg = Marginals.unit(m, n, C.shape[:-2])
    if not np.all(np.isfinite(C.data)):
        raise ValueError("cost matrix has non-finite entries")
    eps = _sample_noise(C.shape, cfg, rng, noise)
    inner_marg = _detached(marg)
    reference = None
    if cfg.alpha > 0 and cfg.similarity is not None:
        if cfg.similarity.shape[-1] != m:
            raise ValueError(f"similarity must be {m}x{m} (slots x slots)")
        ref_plan, _ = sinkhorn(ad.detach(C), inner_marg, cfg.outer)
        reference = Tensor(ref_plan.data)
    trace = MeshTrace()
    unroll = not cfg.straight_through and C.tape is not None
    if unroll:
        Cp = C + Tensor(eps)
    else:
        Cp = C.data + eps
    sv = None
    for _ in range(cfg.steps):
        warm = sv if cfg.warm_start else None
        if unroll:
            obj, h, plan, sv = _objective(Cp, inner_marg, cfg, warm, reference)
            g = ad.backward(ad.reduce_sum(obj), create_graph=True)[Cp]
            _, flat = _normalized_step(g.data, cfg.lr)
            keep = Tensor((~flat).astype(np.float64)[..., None, None])
            norm = ad.sqrt(ad.reduce_sum(g * g, axis=(-2, -1), keepdims=True) + Tensor(flat[..., None, None] * 1.0))
            if record:
                trace.costs.append(Cp.data.copy())
            Cp = Cp - keep * (g * cfg.lr) / norm
        else:
            tape = ad.Tape()
            Cv = tape.variable(Cp)
            obj, h, plan, sv = _objective(Cv, inner_marg, cfg, warm, reference)
            sv = sv.detached()
            g = ad.backward(ad.reduce_sum(obj))[Cv]
            tape.release()
            step, flat = _normalized_step(g, cfg.lr)
            if record:
                trace.costs.append(Cp.copy())
            Cp = Cp - step
        trace.entropies.append(np.array(h.data))
        trace.scalings.append(sv)
        trace.skipped.append(flat)
        if record:
            trace.plans.append(plan.data.copy())
    if unroll:
        C_final = Cp
    elif C.tape is not None:
        C_final = C + Tensor(Cp - C.data)  # straight-through: dC'/dC = I
    else:
        C_final = Tensor(Cp)
    final_warm = sv if cfg.warm_start else None
    plan, _ = sinkhorn(C_final, marg, cfg.outer, final_warm)
    trace.final_cost = C_final.data.copy()
    trace.final_warm = final_warm
    return C_final, plan, trace


def mesh_similarity(C, marg: Marginals | None, cfg: MeshConfig, rng=None, noise=None, record=False):
    """MESH on entropy plus ``alpha * ||S^T sinkhorn(C') - sinkhorn(C)||^2``.

    ``S`` is slots x slots with columns summing to 1, so plan mass may move
    freely between slots that ``S`` marks as similar.
    """
    if cfg.similarity is None:
        raise ValueError("mesh_similarity needs cfg.similarity")
    return mesh(C, marg, cfg, rng=rng, noise=noise, record=record)


@dataclass
class GradientCheckReport:
    max_abs_diff: float
    passed: bool
    unrolled_max_abs_diff: float
    tolerance: float = 1e-12


def _loss_fn(loss) -> Callable[[TransportPlan], Tensor]:
    if callable(loss):
        return loss
    if loss == "sum":
        return lambda p: ad.reduce_sum(p.values)
    if loss == "entropy":
        return lambda p: ad.reduce_sum(entropy(p))
    raise ValueError(f"unknown loss {loss!r}")


def straight_through_gradient_check(C, marg: Marginals | None = None, cfg: MeshConfig | None = None,
                                    loss="sum", rng=None, tolerance: float = 1e-12) -> GradientCheckReport:
    """Compare the straight-through MESH gradient with the gradient of the final solve.

    Also reports how far the fully unrolled gradient is from the
    straight-through one.
    """
    cfg = cfg or MeshConfig()
    if not cfg.straight_through:
        raise ValueError("straight_through must be on for this check")
    L = _loss_fn(loss)
    C0 = np.asarray(C.data if isinstance(C, Tensor) else C, dtype=np.float64)
    eps = _sample_noise(C0.shape, cfg, rng, None)

    tape = ad.Tape()
    Cv = tape.variable(C0)
    _, plan, trace = mesh(Cv, marg, cfg, noise=eps)
    g_st = ad.backward(L(plan))[Cv]

    tape = ad.Tape()
    X = tape.variable(trace.final_cost)
    plan2, _ = sinkhorn(X, marg, cfg.outer, trace.final_warm)
    g_ref = ad.backward(L(plan2))[X]

    tape = ad.Tape()
    Cu = tape.variable(C0)
    _, plan3, _ = mesh(Cu, marg, replace(cfg, straight_through=False), noise=eps)
    g_unroll = ad.backward(L(plan3))[Cu]

    diff = float(np.max(np.abs(g_st - g_ref)))
    return GradientCheckReport(diff, diff <= tolerance, float(np.max(np.abs(g_unroll - g_st))), tolerance)
