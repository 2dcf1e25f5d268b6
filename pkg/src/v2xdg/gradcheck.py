"""Randomized central-difference checks for every differentiable kernel.

Error metric: for each input tensor, ``max|analytic - numeric|`` divided by
``max(max|analytic|, max|numeric|)`` (0 when both gradients vanish).  This
is relative to the gradient's own scale, so entries that are legitimately
tiny do not blow the ratio up.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import toy
from .errors import InvalidStep, UnknownTarget

KERNEL_TOL = 1e-5
ENCODE_TOL = 1e-6
END_TO_END_TOL = 1e-4

Inputs = dict[str, np.ndarray]
Fn = Callable[[Inputs], tuple[float, Inputs]]


@dataclass
class GradCheckResult:
    target: str
    trials: int
    max_rel_err: float
    threshold: float
    worst_input: str | None = None
    worst_index: tuple | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, tuple]:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(n).max(initial=0.0)))
    if diff.size == 0 or scale == 0.0:
        return 0.0, ()
    idx = np.unravel_index(int(np.argmax(diff)), diff.shape)
    return float(diff[idx]) / scale, tuple(int(i) for i in idx)


def numerical_grad(fn: Callable[[Inputs], float], inputs: Inputs, name: str, eps: float) -> np.ndarray:
    x = inputs[name]
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = fn(inputs)
        x[idx] = orig - eps
        fm = fn(inputs)
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * eps)
    return g


# ---------------------------------------------------------------------------
# random instances; each returns (inputs, fn) with fn -> (value, grads)
# ---------------------------------------------------------------------------


def _away_from_zero(rng, shape, gap=0.05):
    """Differences bounded away from the L1 kink."""
    mag = rng.uniform(gap, 1.0, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _case_l_pat(rng):
    shape = (4, 3, 3)
    I_a = rng.standard_normal(shape)
    I_s = I_a + _away_from_zero(rng, shape)
    T = (rng.random(shape[1:]) < 0.6).astype(float)

    def fn(x):
        r = L.l_pat(x["I_s"], x["I_a"], T)
        return r.value, r.grads
    return {"I_s": I_s, "I_a": I_a}, fn


def _case_l_ffa(rng):
    shape = (3, 4, 4)
    F_a = rng.standard_normal(shape)
    F_s = F_a + _away_from_zero(rng, shape)

    def fn(x):
        r = L.l_ffa(x["F_s"], x["F_a"])
        return r.value, r.grads
    return {"F_s": F_s, "F_a": F_a}, fn


def _unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _case_aca_agent(rng):
    B, D = 4, 6
    ids = ["a", "b", "a", "c"]

    def fn(x):
        r = L.aca_agent_arrays(ids, x["source"], x["augmented"], 0.07)
        return r.value, r.grads
    return {"source": _unit_rows(rng, B, D), "augmented": _unit_rows(rng, B, D)}, fn


def _case_aca_group(rng):
    B, D = 3, 5

    def fn(x):
        r = L.aca_group_arrays(x["source"], x["augmented"], 0.07)
        return r.value, r.grads
    return {"source": _unit_rows(rng, B, D), "augmented": _unit_rows(rng, B, D)}, fn


def _case_focal(rng):
    shape = (5, 4)
    targets = (rng.random(shape) < 0.4).astype(float)

    def fn(x):
        r = L.focal_loss(x["pred_logits"], targets, 0.25, 2.0)
        return r.value, r.grads
    return {"pred_logits": rng.uniform(-4.0, 4.0, size=shape)}, fn


def _case_smooth_l1(rng):
    shape = (6, 3)
    target = rng.standard_normal(shape)
    # keep |d| clear of 0 and of beta = 1
    d = rng.choice([-1.0, 1.0], size=shape) * np.where(
        rng.random(shape) < 0.5, rng.uniform(0.05, 0.9, size=shape), rng.uniform(1.1, 3.0, size=shape))

    def fn(x):
        r = L.smooth_l1(x["pred"], x["target"], 1.0)
        return r.value, r.grads
    return {"pred": target + d, "target": target}, fn


def _case_embed(rng):
    F = rng.standard_normal((4, 3, 3)) + 0.5
    w = rng.standard_normal(4)

    def fn(x):
        e = L.embed(x["F"])
        return float(w @ e), {"F": L.embed_vjp(x["F"], w)}
    return {"F": F}, fn


def _case_encode(rng):
    I = rng.standard_normal((3, 3, 3))
    W = rng.standard_normal((2, 3))
    b = rng.standard_normal(2)
    G = rng.standard_normal((2, 3, 3))

    def fn(x):
        p = toy.EncoderParams(x["weight"], x["bias"])
        out = toy.encode(x["I"], p)
        back = toy.encode_vjp(x["I"], p, G)
        return float((G * out).sum()), back
    return {"I": I, "weight": W, "bias": b}, fn


def _case_fuse(rng):
    N, shape = 3, (2, 3, 3)
    feats = rng.uniform(0.1, 1.5, size=(N, *shape))
    G = rng.standard_normal(shape)

    def fn(x):
        p = toy.FusionParams(float(x["query_scale"]))
        out = toy.fuse(list(x["features"]), p)
        dF, dq = toy.fuse_vjp(list(x["features"]), p, G)
        return float((G * out).sum()), {"features": np.stack(dF), "query_scale": np.array(dq)}
    return {"features": feats, "query_scale": np.array(rng.uniform(0.5, 2.0))}, fn


def _case_forward_losses(rng):
    seed = int(rng.integers(0, 2**31))
    scene = toy.make_demo_scene(seed=seed, n_agents=2, n_points=200)
    cfg = toy.PipelineConfig(seed=seed)
    flows = toy.prepare_flows(scene, cfg)
    enc = toy.EncoderParams.init(cfg.grid.channels, cfg.grid.channels, seed=seed, scale=toy.DEMO_INIT_SCALE)

    def fn(x):
        e = toy.EncoderParams(x["weight"], x["bias"])
        f = toy.FusionParams(float(x["query_scale"]))
        r = toy.alignment_losses(flows, e, f, cfg.coeff)
        return r.value, r.grads
    return {"weight": enc.weight.copy(), "bias": enc.bias.copy(), "query_scale": np.array(1.0)}, fn


TARGETS: dict[str, tuple[Callable, float]] = {
    "l_pat": (_case_l_pat, KERNEL_TOL),
    "l_ffa": (_case_l_ffa, KERNEL_TOL),
    "aca_agent": (_case_aca_agent, KERNEL_TOL),
    "aca_group": (_case_aca_group, KERNEL_TOL),
    "focal_loss": (_case_focal, KERNEL_TOL),
    "smooth_l1": (_case_smooth_l1, KERNEL_TOL),
    "embed": (_case_embed, KERNEL_TOL),
    "encode": (_case_encode, ENCODE_TOL),
    "fuse": (_case_fuse, KERNEL_TOL),
    "forward_losses": (_case_forward_losses, END_TO_END_TOL),
}


def grad_check(target: str, trials: int = 20, eps: float = 1e-5, seed: int = 0) -> GradCheckResult:
    """Worst relative error between analytic and central-difference gradients.

    Raises:
        UnknownTarget: ``target`` is not in :data:`TARGETS`.
        InvalidStep: ``eps`` is not positive.
    """
    if target not in TARGETS:
        raise UnknownTarget(f"unknown gradcheck target {target!r}; known: {', '.join(TARGETS)}")
    if not eps > 0:
        raise InvalidStep(f"finite-difference step must be > 0, got {eps}")
    make, tol = TARGETS[target]
    result = GradCheckResult(target, trials, 0.0, tol)
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        inputs, fn = make(rng)
        inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
        _, analytic = fn(inputs)

        def value(x):
            return fn(x)[0]

        for name in inputs:
            numeric = numerical_grad(value, inputs, name, eps)
            err, idx = relative_error(analytic[name], numeric)
            if result.worst_input is None or err > result.max_rel_err:
                result.max_rel_err = err
                result.worst_input, result.worst_index = name, idx
    return result
