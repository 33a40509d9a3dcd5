"""Slot attention and its transport-based variants.

Variants differ only in how the attention matrix between slots and inputs
is built:

* ``SA``      softmax over slots, then each slot's row normalized to 1
* ``SA_SH``   Sinkhorn plan on pairwise distances with learned marginals
* ``SA_EMD``  exact plan plus Sinkhorn plan (Sinkhorn supplies the gradient)
* ``SA_MESH`` Sinkhorn plan of the MESH-adjusted cost

All tensors carry a leading batch axis: slots ``(B, m, d)``, inputs ``(B, n, c)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mesh import MeshConfig, mesh
from .ot import Marginals, SinkhornConfig, distance_costs, emd_with_sinkhorn_surrogate, sinkhorn

VARIANTS = ("SA", "SA_SH", "SA_EMD", "SA_MESH")
SLOT_INITS = ("gaussian", "shared")


def canonical_variant(name: str) -> str:
    v = name.upper().replace("-", "_")
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return v


@dataclass
class SAConfig:
    num_slots: int = 5
    iterations: int = 3
    variant: str = "SA_MESH"
    metric: str = "l2"
    scale_by_sqrt_dk: Optional[bool] = None  # None: on for SA only
    implicit_diff: bool = True
    slot_init: str = "gaussian"
    residual_mlp: bool = False
    input_norm: bool = False
    input_dim: int = 32
    slot_dim: int = 32
    key_dim: int = 32
    value_dim: int = 32
    marginal_hidden: int = 32
    mlp_hidden: int = 64
    mesh: MeshConfig = field(default_factory=MeshConfig)
    sinkhorn: SinkhornConfig = field(default_factory=lambda: SinkhornConfig(max_iterations=20, tol=1e-6))

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.num_slots < 1 or self.iterations < 1:
            raise ValueError("num_slots and iterations must be >= 1")
        if self.slot_init not in SLOT_INITS:
            raise ValueError(f"slot_init must be one of {SLOT_INITS}")

    @property
    def logit_scaling(self) -> bool:
        if self.scale_by_sqrt_dk is None:
            return self.variant == "SA"
        return self.scale_by_sqrt_dk


@dataclass
class AttentionTrace:
    attention: list = field(default_factory=list)
    marginals: list = field(default_factory=list)


def _xavier(rng, fan_in, fan_out, shape=None):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def init_params(cfg: SAConfig, rng) -> dict[str, np.ndarray]:
    """Fresh parameters: Xavier-uniform weights, zero biases."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    d, c, dk, dv, hm = cfg.slot_dim, cfg.input_dim, cfg.key_dim, cfg.value_dim, cfg.marginal_hidden
    p = {
        "W_Q": _xavier(rng, d, dk),
        "W_K": _xavier(rng, c, dk),
        "W_V": _xavier(rng, c, dv),
    }
    for gate in ("z", "r", "h"):
        p[f"gru_W_{gate}"] = _xavier(rng, dv, d)
        p[f"gru_U_{gate}"] = _xavier(rng, d, d)
        p[f"gru_b_{gate}"] = np.zeros(d)
    p["ha_W1"] = _xavier(rng, d, hm)
    p["ha_b1"] = np.zeros(hm)
    p["ha_W2"] = _xavier(rng, hm, 1)
    p["ha_b2"] = np.zeros(1)
    p["hb_W1"] = _xavier(rng, c, hm)
    p["hb_b1"] = np.zeros(hm)
    p["hb_W2"] = _xavier(rng, hm, 1)
    p["hb_b2"] = np.zeros(1)
    p["slot_mu"] = _xavier(rng, 1, d, (d,))
    p["slot_log_sigma"] = _xavier(rng, 1, d, (d,))
    if cfg.input_norm:
        p["ln_gain"] = np.ones(c)
        p["ln_bias"] = np.zeros(c)
    if cfg.residual_mlp:
        p["mlp_W1"] = _xavier(rng, d, cfg.mlp_hidden)
        p["mlp_b1"] = np.zeros(cfg.mlp_hidden)
        p["mlp_W2"] = _xavier(rng, cfg.mlp_hidden, d)
        p["mlp_b2"] = np.zeros(d)
    return p


def init_slots(params, m: int, rng, mode: str = "gaussian", batch: int | None = None) -> np.ndarray:
    """Initial slots: i.i.d. draws from the learned Gaussian, or ``m`` copies of its mean."""
    mu = np.asarray(params["slot_mu"].data if isinstance(params["slot_mu"], Tensor) else params["slot_mu"])
    shape = (m, mu.shape[-1]) if batch is None else (batch, m, mu.shape[-1])
    if mode == "shared":
        return np.broadcast_to(mu, shape).copy()
    if mode != "gaussian":
        raise ValueError(f"unknown slot init {mode!r}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    ls = params["slot_log_sigma"]
    sigma = np.exp(np.asarray(ls.data if isinstance(ls, Tensor) else ls))
    return mu + sigma * rng.standard_normal(shape)


def layer_norm(X, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row standardization over the feature axis with a learned affine map."""
    X = ad.as_tensor(X)
    centered = X - ad.mean(X, axis=-1, keepdims=True)
    var = ad.mean(centered * centered, axis=-1, keepdims=True)
    return centered / ad.sqrt(var + eps) * gain + bias


def baseline_attention(Q, K, scale: bool = False) -> Tensor:
    """Softmax over slots for every input, then each slot's row rescaled to sum to 1."""
    logits = ad.matmul(Q, ad.transpose(K))
    if scale:
        logits = logits * (1.0 / math.sqrt(Q.shape[-1]))
    attn = ad.softmax(logits, axis=-2)
    rows = ad.reduce_sum(attn, axis=-1, keepdims=True)
    assert np.all(rows.data > 0), "attention row with zero mass"
    return attn / rows


def _mlp_scalar(x: Tensor, params, prefix: str) -> Tensor:
    h = ad.relu(ad.matmul(x, params[f"{prefix}_W1"]) + params[f"{prefix}_b1"])
    out = ad.matmul(h, params[f"{prefix}_W2"]) + params[f"{prefix}_b2"]
    return ad.reshape(out, out.shape[:-1])


def input_marginal(X, params, m: int) -> Tensor:
    return ad.softmax(_mlp_scalar(ad.as_tensor(X), params, "hb"), axis=-1) * float(m)


def learned_marginals(Z, X, params, b=None) -> Marginals:
    """``a = m softmax(h_a(Z))`` over slots and ``b = m softmax(h_b(X))`` over inputs."""
    Z = ad.as_tensor(Z)
    m = Z.shape[-2]
    a = ad.softmax(_mlp_scalar(Z, params, "ha"), axis=-1) * float(m)
    if b is None:
        b = input_marginal(X, params, m)
    return Marginals(a, b)


def gru(h, x, params) -> Tensor:
    """GRU step with the slot as hidden state: ``h' = (1 - z) h + z tanh(...)``."""
    z = ad.sigmoid(ad.matmul(x, params["gru_W_z"]) + ad.matmul(h, params["gru_U_z"]) + params["gru_b_z"])
    r = ad.sigmoid(ad.matmul(x, params["gru_W_r"]) + ad.matmul(h, params["gru_U_r"]) + params["gru_b_r"])
    cand = ad.tanh(ad.matmul(x, params["gru_W_h"]) + ad.matmul(r * h, params["gru_U_h"]) + params["gru_b_h"])
    return h + z * (cand - h)


def _as_params(params) -> dict:
    return {k: ad.as_tensor(v) for k, v in params.items()}


def attention(Z, K, X, params, cfg: SAConfig, rng=None, b=None):
    """Attention matrix of one iteration and the marginals it used (``None`` for SA)."""
    Q = ad.matmul(Z, params["W_Q"])
    if cfg.variant == "SA":
        return baseline_attention(Q, K, cfg.logit_scaling), None
    C = distance_costs(Q, K, cfg.metric)
    if cfg.logit_scaling:
        C = C * (1.0 / math.sqrt(Q.shape[-1]))
    marg = learned_marginals(Z, X, params, b)
    if cfg.variant == "SA_SH":
        plan, _ = sinkhorn(C, marg, cfg.sinkhorn)
    elif cfg.variant == "SA_EMD":
        plan = emd_with_sinkhorn_surrogate(C, marg, cfg.sinkhorn)
    else:
        _, plan, _ = mesh(C, marg, cfg.mesh, rng=rng)
    return plan.values, marg


def sa_iteration(Z, X, params, cfg: SAConfig, rng=None, K=None, V=None, b=None):
    """One round of attention followed by the GRU slot update.

    Returns ``(Z_next, A, marginals)``; ``marginals`` is ``None`` for ``SA``.
    """
    params = _as_params(params)
    Z = ad.as_tensor(Z)
    X = ad.as_tensor(X)
    if K is None:
        K = ad.matmul(X, params["W_K"])
    if V is None:
        V = ad.matmul(X, params["W_V"])
    A, marg = attention(Z, K, X, params, cfg, rng, b)
    updates = ad.matmul(A, V)
    Z_next = gru(Z, updates, params)
    if cfg.residual_mlp:
        h = ad.relu(ad.matmul(Z_next, params["mlp_W1"]) + params["mlp_b1"])
        Z_next = Z_next + ad.matmul(h, params["mlp_W2"]) + params["mlp_b2"]
    return Z_next, A, marg


def forward(X, params, cfg: SAConfig, rng=None, Z0=None):
    """Run ``cfg.iterations`` rounds; returns ``(Z_L, AttentionTrace)``.

    With ``implicit_diff`` every round but the last runs on detached
    parameters and the last round starts from detached slots.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    X = ad.as_tensor(X)
    batched = X.ndim == 3
    linked = _as_params(params)
    const = {k: ad.detach(v) for k, v in linked.items()} if cfg.implicit_diff else linked
    if Z0 is None:
        Z0 = init_slots(linked, cfg.num_slots, rng, cfg.slot_init, X.shape[0] if batched else None)
    Z = ad.as_tensor(Z0)
    trace = AttentionTrace()

    def run(Z, P, l_count):
        Xn = layer_norm(X, P["ln_gain"], P["ln_bias"]) if cfg.input_norm else X
        K = ad.matmul(Xn, P["W_K"])
        V = ad.matmul(Xn, P["W_V"])
        b = None if cfg.variant == "SA" else input_marginal(Xn, P, cfg.num_slots)
        for _ in range(l_count):
            Z, A, marg = sa_iteration(Z, Xn, P, cfg, rng, K, V, b)
            trace.attention.append(A.data)
            trace.marginals.append(None if marg is None else (marg.a.data, marg.b.data))
        return Z

    if cfg.implicit_diff:
        if cfg.iterations > 1:
            Z = run(Z, const, cfg.iterations - 1)
        Z = run(ad.detach(Z), linked, 1)
    else:
        Z = run(Z, linked, cfg.iterations)
    return Z, trace
