"""Diagnostic experiments: entropy/gradient sweep and warm-start gap."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .mesh import MeshConfig, mesh
from .ot import Marginals, SinkhornConfig, entropy, normalized_entropy, sinkhorn

CSV_COLUMNS = ("method", "param", "factor", "entropy_norm", "grad_norm_raw", "grad_norm_methodnorm")
GAP_COLUMNS = ("mesh_iterations", "gap_warm", "gap_cold")


@dataclass
class SweepConfig:
    size: int = 10
    factor_min: float = 1e-3
    factor_max: float = 1e3
    num_factors: int = 60
    temperatures: list = field(default_factory=lambda: [0.1, 1.0])
    learning_rates: list = field(default_factory=lambda: [0.1, 0.3, 1.0, 3.0])
    seeds: list = field(default_factory=lambda: [0])
    mesh_steps: int = 12
    mesh_temperature: float = 1.0
    noise_std: float = 1e-3

    def __post_init__(self):
        if not (0 < self.factor_min <= self.factor_max):
            raise ValueError("scaling factors must be positive and ordered")
        if self.num_factors < 1 or not self.temperatures or not self.learning_rates or not self.seeds:
            raise ValueError("sweep lists must be nonempty")

    def factors(self) -> np.ndarray:
        return np.logspace(math.log10(self.factor_min), math.log10(self.factor_max), self.num_factors)


@dataclass(frozen=True)
class ResultRow:
    method: str
    param: float
    factor: float
    entropy_norm: float
    grad_norm_raw: float
    grad_norm_methodnorm: float

    def as_csv(self) -> list[str]:
        return [self.method] + [repr(float(getattr(self, f))) for f in CSV_COLUMNS[1:]]

    @classmethod
    def from_csv(cls, rec: dict) -> "ResultRow":
        return cls(rec["method"], *(float(rec[c]) for c in CSV_COLUMNS[1:]))


def sweep_cost(size: int, factor: float) -> np.ndarray:
    """Negated scaled identity: larger factors favor the diagonal more strongly."""
    return -factor * np.eye(size)


def _sinkhorn_point(C0, tau):
    tape = ad.Tape()
    C = tape.variable(C0)
    plan, _ = sinkhorn(C, None, SinkhornConfig(temperature=tau, max_iterations=10000, tol=1e-10))
    h = ad.reduce_sum(entropy(plan))
    g = ad.backward(h)[C]
    return normalized_entropy(plan), float(np.linalg.norm(g))


def _mesh_point(C0, lr, cfg: SweepConfig, rng):
    mcfg = MeshConfig(steps=cfg.mesh_steps, lr=lr, noise_std=cfg.noise_std).with_temperature(cfg.mesh_temperature)
    mcfg = replace(mcfg, outer=replace(mcfg.outer, max_iterations=10000, tol=1e-10))
    tape = ad.Tape()
    C = tape.variable(C0)
    _, plan, _ = mesh(C, None, mcfg, rng=rng)
    h = ad.reduce_sum(entropy(plan))
    g = ad.backward(h)[C]
    return normalized_entropy(plan), float(np.linalg.norm(g))


def entropy_sweep(cfg: SweepConfig) -> list[ResultRow]:
    """Entropy and entropy-gradient norm of Sinkhorn and MESH plans over scaled identities.

    Values are averaged over ``cfg.seeds``; gradient norms are also reported
    divided by each curve's maximum.
    """
    factors = cfg.factors()
    curves: dict[tuple, list] = {}
    for tau in cfg.temperatures:
        pts = []
        for f in factors:
            e, g = _sinkhorn_point(sweep_cost(cfg.size, f), tau)
            pts.append((f, e, g))
        curves[("sinkhorn", float(tau))] = pts
    for lr in cfg.learning_rates:
        pts = []
        for k, f in enumerate(factors):
            es, gs = [], []
            for seed in cfg.seeds:
                rng = np.random.default_rng([int(seed), k])
                e, g = _mesh_point(sweep_cost(cfg.size, f), lr, cfg, rng)
                es.append(e)
                gs.append(g)
            pts.append((f, float(np.mean(es)), float(np.mean(gs))))
        curves[("mesh", float(lr))] = pts
    rows = []
    for (method, param), pts in curves.items():
        gmax = max(p[2] for p in pts)
        for f, e, g in pts:
            rows.append(ResultRow(method, param, float(f), float(min(max(e, 0.0), 1.0)), g,
                                  g / gmax if gmax > 0 else 0.0))
    rows.sort(key=lambda r: (r.method, r.param, r.factor))
    return rows


def nontrivial_gradient_width(rows: Iterable[ResultRow], method: str, param: float,
                              threshold: float = 0.01) -> float:
    """Span in decades of the factors whose normalized gradient norm reaches ``threshold``."""
    fs = [r.factor for r in rows if r.method == method and r.param == param and r.grad_norm_methodnorm >= threshold]
    if not fs:
        return 0.0
    return math.log10(max(fs)) - math.log10(min(fs))


def write_rows(rows: Sequence[ResultRow], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())


def read_rows(path: Path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        return [ResultRow.from_csv(rec) for rec in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# warm-start gap
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GapRow:
    mesh_iterations: int
    gap_warm: float
    gap_cold: float


def warmstart_gap(iters: Sequence[int], trials: int, rng=None, size: int = 8,
                  inner_iterations: int | None = 5, lr: float = 1.0) -> list[GapRow]:
    """Mean absolute gap between budgeted inner plans and fully converged plans.

    For every trial one random cost and one noise draw are shared by a MESH
    run that reuses the scaling vectors between steps and one that restarts
    cold.  The gap at MESH iteration ``t`` compares the ``t``-th inner plan of
    each run with a to-convergence solve on that run's own cost.  With
    ``inner_iterations=None`` inner solves also run to convergence.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    iters = sorted(set(int(t) for t in iters))
    if not iters or iters[0] < 1:
        raise ValueError("iteration counts must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    T = iters[-1]
    if inner_iterations is None:
        inner = SinkhornConfig(max_iterations=100000, tol=1e-13)
    else:
        inner = SinkhornConfig(max_iterations=inner_iterations, tol=0.0)
    full = SinkhornConfig(max_iterations=100000, tol=1e-13)
    marg = Marginals.unit(size, size)
    warm_gaps = np.zeros((trials, T))
    cold_gaps = np.zeros((trials, T))
    for k in range(trials):
        C = rng.normal(size=(size, size))
        eps = rng.normal(0.0, 1e-3, size=(size, size))
        for warm, out in ((True, warm_gaps), (False, cold_gaps)):
            cfg = MeshConfig(steps=T, lr=lr, inner=inner, warm_start=warm)
            _, _, trace = mesh(C, marg, cfg, noise=eps, record=True)
            for t in range(T):
                ref, _ = sinkhorn(trace.costs[t], marg, full)
                out[k, t] = np.mean(np.abs(trace.plans[t] - ref.data))
    return [GapRow(t, float(warm_gaps[:, t - 1].mean()), float(cold_gaps[:, t - 1].mean())) for t in iters]


def write_gap_rows(rows: Sequence[GapRow], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GAP_COLUMNS)
        for r in rows:
            w.writerow([r.mesh_iterations, repr(r.gap_warm), repr(r.gap_cold)])


def read_gap_rows(path: Path) -> list[GapRow]:
    with open(path, newline="") as fh:
        return [GapRow(int(r["mesh_iterations"]), float(r["gap_warm"]), float(r["gap_cold"]))
                for r in csv.DictReader(fh)]
