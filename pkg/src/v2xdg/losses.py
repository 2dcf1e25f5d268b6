"""Alignment, contrastive and detection loss kernels with analytic gradients.

Every kernel returns a :class:`LossReport` whose ``grads`` maps each input
name to an array of that input's shape.  Scalar reductions go through
:func:`math.fsum`, so a loss value does not depend on summation order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyBatch, InvalidParams, NonFiniteInput, NonUnitEmbedding, ShapeMismatch

UNIT_TOL = 1e-9


@dataclass(frozen=True)
class LossCoefficients:
    alpha1: float = 0.1
    alpha2: float = 1.0
    beta1: float = 0.01
    beta2: float = 0.01
    tau: float = 0.07
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise InvalidParams(f"tau must be > 0, got {self.tau}")
        for name in ("alpha1", "alpha2", "beta1", "beta2", "focal_alpha", "focal_gamma"):
            if not getattr(self, name) >= 0:
                raise InvalidParams(f"{name} must be >= 0")
        if not self.smooth_l1_beta > 0:
            raise InvalidParams("smooth_l1_beta must be > 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "LossCoefficients":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidParams(f"unknown loss coefficients: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    parts: dict[str, float] = field(default_factory=dict)


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: shapes {a.shape} and {b.shape} differ")


def _fsum(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    return math.fsum(x[x != 0].tolist())


# ---------------------------------------------------------------------------
# trust-region weather-invariant alignment
# ---------------------------------------------------------------------------


def l_pat(I_s, I_a, T) -> LossReport:
    """Masked L1 distance between source and augmented pillar images.

    ``value = sum_{h,w} T[h,w] * sum_c |I_s[c,h,w] - I_a[c,h,w]|``.  The
    subgradient at a zero difference is taken as 0.
    """
    s, a, t = _arr(I_s), _arr(I_a), _arr(T)
    _same_shape(s, a, "l_pat images")
    if s.ndim != 3 or t.shape != s.shape[1:]:
        raise ShapeMismatch(f"l_pat: mask {t.shape} does not fit images {s.shape}")
    diff = s - a
    value = _fsum(t[None] * np.abs(diff))
    g = t[None] * np.sign(diff)
    return LossReport(value, {"I_s": g, "I_a": -g})


def l_ffa(F_s, F_a) -> LossReport:
    """Unmasked L1 distance between source and augmented fused features."""
    s, a = _arr(F_s), _arr(F_a)
    _same_shape(s, a, "l_ffa features")
    diff = s - a
    g = np.sign(diff)
    return LossReport(_fsum(np.abs(diff)), {"F_s": g, "F_a": -g})


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def embed(F) -> np.ndarray:
    """Global-average-pool a ``C x H x W`` map (or take a vector) and L2-normalize.

    The zero vector maps to ``e_1``.
    """
    v = _pool(_arr(F))
    n = float(np.linalg.norm(v))
    if n == 0.0:
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / n


def embed_vjp(F, grad_out: np.ndarray) -> np.ndarray:
    """Pull a gradient on the embedding back to the input map."""
    x = _arr(F)
    v = _pool(x)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        return np.zeros_like(x)
    u = v / n
    g = np.asarray(grad_out, dtype=np.float64)
    gv = (g - u * float(u @ g)) / n
    if x.ndim == 1:
        return gv
    hw = x.shape[1] * x.shape[2]
    return np.broadcast_to((gv / hw)[:, None, None], x.shape).copy()


def _pool(x: np.ndarray) -> np.ndarray:
    if x.ndim == 1:
        return x.copy()
    if x.ndim != 3:
        raise ShapeMismatch(f"expected C x H x W or a vector, got shape {x.shape}")
    return x.mean(axis=(1, 2))


# ---------------------------------------------------------------------------
# agent-aware contrastive alignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AgentBatch:
    """Agent-level contrastive batch: one row per (agent, sample) entry."""

    ids: tuple[str, ...]
    source: np.ndarray
    augmented: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids", tuple(self.ids))
        s = np.atleast_2d(np.asarray(self.source, dtype=np.float64))
        a = np.atleast_2d(np.asarray(self.augmented, dtype=np.float64))
        object.__setattr__(self, "source", s)
        object.__setattr__(self, "augmented", a)
        if not self.ids or s.shape[0] == 0:
            raise EmptyBatch("agent batch is empty")
        if s.shape != a.shape or s.shape[0] != len(self.ids):
            raise ShapeMismatch(f"agent batch: ids={len(self.ids)}, source {s.shape}, augmented {a.shape}")

    @classmethod
    def from_entries(cls, entries: Sequence[tuple[str, np.ndarray, np.ndarray]]) -> "AgentBatch":
        if not entries:
            raise EmptyBatch("agent batch is empty")
        ids, s, a = zip(*entries)
        return cls(ids, np.stack(s), np.stack(a))

    def positives(self) -> list[list[int]]:
        return [[p for p, q in enumerate(self.ids) if q == i] for i in self.ids]


@dataclass(frozen=True, eq=False)
class GroupBatch:
    """Group-level batch: fused source/augmented embeddings, one row per group."""

    source: np.ndarray
    augmented: np.ndarray

    def __post_init__(self) -> None:
        s = np.atleast_2d(np.asarray(self.source, dtype=np.float64))
        a = np.atleast_2d(np.asarray(self.augmented, dtype=np.float64))
        object.__setattr__(self, "source", s)
        object.__setattr__(self, "augmented", a)
        if s.shape[0] == 0:
            raise EmptyBatch("group batch is empty")
        if s.shape != a.shape:
            raise ShapeMismatch(f"group batch: source {s.shape} vs augmented {a.shape}")


def _check_unit(*mats: np.ndarray) -> None:
    for m in mats:
        norms = np.linalg.norm(m, axis=1)
        bad = np.abs(norms - 1.0) > UNIT_TOL
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NonUnitEmbedding(f"row {i} has norm {norms[i]!r}")


def _lse(v: np.ndarray) -> float:
    mx = float(np.max(v))
    return mx + math.log(math.fsum(np.exp(v - mx).tolist()))


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - np.max(v))
    return e / e.sum()


def aca_agent_arrays(ids: Sequence[str], Fs: np.ndarray, Fa: np.ndarray, tau: float,
                     cross_terms: bool = False) -> LossReport:
    """Agent-level contrastive loss on raw embedding matrices (no unit-norm check).

    For each anchor ``i`` and each same-ID entry ``p`` (including ``i``) the
    term is ``log(e^{s_i.s_p/t} + e^{s_i.a_p/t} + e^{a_i.a_p/t})`` minus
    ``log(sum_j e^{s_i.s_j/t} + sum_k e^{a_i.a_k/t})``; the loss is minus
    the mean over anchors of the summed terms.  ``cross_terms`` adds
    ``sum_j e^{s_i.a_j/t}`` inside the second log.
    """
    Fs = np.asarray(Fs, dtype=np.float64)
    Fa = np.asarray(Fa, dtype=np.float64)
    B = Fs.shape[0]
    if B == 0:
        raise EmptyBatch("agent batch is empty")
    S = Fs @ Fs.T / tau
    X = Fs @ Fa.T / tau
    A = Fa @ Fa.T / tau
    GS = np.zeros((B, B))
    GX = np.zeros((B, B))
    GA = np.zeros((B, B))
    terms = []
    for i in range(B):
        pos = [p for p in range(B) if ids[p] == ids[i]]
        den_logits = [S[i], A[i]] + ([X[i]] if cross_terms else [])
        den_vec = np.concatenate(den_logits)
        den = _lse(den_vec)
        w_den = _softmax(den_vec) * (len(pos) / B)
        GS[i] += w_den[:B]
        GA[i] += w_den[B:2 * B]
        if cross_terms:
            GX[i] += w_den[2 * B:]
        for p in pos:
            trio = np.array([S[i, p], X[i, p], A[i, p]])
            terms.append(_lse(trio) - den)
            w = _softmax(trio) / B
            GS[i, p] -= w[0]
            GX[i, p] -= w[1]
            GA[i, p] -= w[2]
    value = -math.fsum(terms) / B
    dFs = ((GS + GS.T) @ Fs + GX @ Fa) / tau
    dFa = ((GA + GA.T) @ Fa + GX.T @ Fs) / tau
    return LossReport(value, {"source": dFs, "augmented": dFa})


def aca_agent(batch: AgentBatch, tau: float, cross_terms: bool = False) -> LossReport:
    """Agent-level contrastive alignment on a batch of unit embeddings."""
    if not tau > 0:
        raise InvalidParams("tau must be > 0")
    _check_unit(batch.source, batch.augmented)
    return aca_agent_arrays(batch.ids, batch.source, batch.augmented, tau, cross_terms)


def aca_group_arrays(Fs: np.ndarray, Fa: np.ndarray, tau: float) -> LossReport:
    """Group-level contrastive loss on raw embedding matrices (no unit-norm check)."""
    Fs = np.asarray(Fs, dtype=np.float64)
    Fa = np.asarray(Fa, dtype=np.float64)
    B = Fs.shape[0]
    if B == 0:
        raise EmptyBatch("group batch is empty")
    S = Fs @ Fs.T / tau
    X = Fs @ Fa.T / tau
    A = Fa @ Fa.T / tau
    GS = np.zeros((B, B))
    GX = np.zeros((B, B))
    GA = np.zeros((B, B))
    terms = []
    for i in range(B):
        den_vec = np.concatenate([S[i], A[i]])
        terms.append(X[i, i] - _lse(den_vec))
        w = _softmax(den_vec) / B
        GS[i] += w[:B]
        GA[i] += w[B:]
        GX[i, i] -= 1.0 / B
    value = -math.fsum(terms) / B
    dFs = ((GS + GS.T) @ Fs + GX @ Fa) / tau
    dFa = ((GA + GA.T) @ Fa + GX.T @ Fs) / tau
    return LossReport(value, {"source": dFs, "augmented": dFa})


def aca_group(batch: GroupBatch, tau: float) -> LossReport:
    """Group-level contrastive alignment between fused source/augmented embeddings."""
    if not tau > 0:
        raise InvalidParams("tau must be > 0")
    _check_unit(batch.source, batch.augmented)
    return aca_group_arrays(batch.source, batch.augmented, tau)


# ---------------------------------------------------------------------------
# detection losses
# ---------------------------------------------------------------------------


def _reduce(elem: np.ndarray, grad: np.ndarray, reduction: str):
    if reduction == "sum":
        return _fsum(elem), grad
    if reduction == "mean":
        n = max(elem.size, 1)
        return _fsum(elem) / n, grad / n
    raise InvalidParams(f"reduction must be 'sum' or 'mean', got {reduction!r}")


def focal_loss(pred_logits, targets, focal_alpha: float = 0.25, focal_gamma: float = 2.0,
               reduction: str = "sum") -> LossReport:
    """Alpha-balanced binary focal loss on logits.

    With ``q`` the probability assigned to the true class, each element
    costs ``-alpha_t * (1 - q) ** gamma * log(q)``, where ``alpha_t`` is
    ``focal_alpha`` for positives and ``1 - focal_alpha`` for negatives.
    """
    x = np.asarray(pred_logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    _same_shape(x, t, "focal_loss")
    if not np.isin(t, (0.0, 1.0)).all():
        raise InvalidParams("focal_loss targets must be 0 or 1")
    sgn = 2.0 * t - 1.0
    z = sgn * x
    log_q = -np.logaddexp(0.0, -z)
    one_minus_q = np.exp(-np.logaddexp(0.0, z))
    q = np.exp(log_q)
    alpha_t = focal_alpha * t + (1.0 - focal_alpha) * (1.0 - t)
    mod = one_minus_q ** focal_gamma
    elem = -alpha_t * mod * log_q
    grad = sgn * alpha_t * mod * (focal_gamma * q * log_q - one_minus_q)
    value, grad = _reduce(elem, grad, reduction)
    return LossReport(value, {"pred_logits": grad})


def smooth_l1(pred, target, beta: float = 1.0, reduction: str = "sum") -> LossReport:
    """Huber-style loss: ``0.5 d^2 / beta`` below ``beta``, ``|d| - 0.5 beta`` above."""
    if not beta > 0:
        raise InvalidParams("beta must be > 0")
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    _same_shape(p, t, "smooth_l1")
    d = p - t
    ad = np.abs(d)
    small = ad < beta
    elem = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(small, d / beta, np.sign(d))
    value, grad = _reduce(elem, grad, reduction)
    return LossReport(value, {"pred": grad, "target": -grad})


# ---------------------------------------------------------------------------
# total objective
# ---------------------------------------------------------------------------

PART_NAMES = ("det_s", "det_a", "pat", "ffa", "aca_a", "aca_g")


def total_loss(parts: Mapping[str, float], coeff: LossCoefficients) -> float:
    """``det_s + det_a + a1*pat + a2*ffa + b1*aca_a + b2*aca_g``.

    Missing parts count as zero.
    """
    unknown = set(parts) - set(PART_NAMES)
    if unknown:
        raise KeyError(f"unknown loss parts: {sorted(unknown)}")
    vals = {k: float(parts.get(k, 0.0)) for k in PART_NAMES}
    bad = [k for k, v in vals.items() if not math.isfinite(v)]
    if bad:
        raise NonFiniteInput(f"non-finite loss parts: {bad}")
    weights = total_loss_weights(coeff)
    return math.fsum(weights[k] * vals[k] for k in PART_NAMES)


def total_loss_weights(coeff: LossCoefficients) -> dict[str, float]:
    return {
        "det_s": 1.0,
        "det_a": 1.0,
        "pat": coeff.alpha1,
        "ffa": coeff.alpha2,
        "aca_a": coeff.beta1,
        "aca_g": coeff.beta2,
    }
