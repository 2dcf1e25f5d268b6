"""Desk-scale dual-flow pipeline: augment, pillarize, encode, fuse, align.

The encoder is a per-cell affine map followed by softplus, and the fusion
is a per-cell softmax attention over agents.  Both are small enough that
reverse-mode gradients can be checked end to end against finite
differences.  Detection heads are out of scope, so the objective here is
the alignment part of the total loss only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .awa import AwaParams, awa, sample_thresholds
from .errors import EmptyAgentList, InvalidParams, ShapeMismatch
from .losses import (
    AgentBatch,
    GroupBatch,
    LossCoefficients,
    LossReport,
    aca_agent,
    aca_group,
    embed,
    embed_vjp,
    l_ffa,
    l_pat,
    total_loss,
)
from .pillars import GridSpec, PillarImage, TrustMask, pillarize, trust_region
from .pointcloud import AgentFrame, Box3D, PointCloud, Pose, SceneFrame, transform_points
from .weather import derive_seed


# Initial weight scale for demo runs.  At lr 1e-2 smaller scales let the
# L1 terms overshoot their kinks and the objective oscillates.
DEMO_INIT_SCALE = 2.0


@dataclass(frozen=True, eq=False)
class EncoderParams:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ShapeMismatch(f"encoder weight {w.shape} and bias {b.shape} do not agree")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise InvalidParams("encoder parameters must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def init(cls, c_out: int, c_in: int, seed: int = 0, scale: float = 0.1) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        return cls(scale * rng.standard_normal((c_out, c_in)), np.zeros(c_out))


@dataclass(frozen=True)
class FusionParams:
    query_scale: float = 1.0

    def __post_init__(self) -> None:
        if not self.query_scale > 0:
            raise InvalidParams("query_scale must be > 0")


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    awa: AwaParams = field(default_factory=AwaParams)
    coeff: LossCoefficients = field(default_factory=LossCoefficients)
    shared_thresholds: bool = False
    seed: int = 0
    aca_cross_terms: bool = False

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {"grid", "awa", "coeff", "shared_thresholds", "seed", "aca_cross_terms"}
        unknown = set(doc) - known
        if unknown:
            raise InvalidParams(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(
            grid=GridSpec.from_dict(doc.get("grid", {})),
            awa=AwaParams.from_dict(doc.get("awa", {})),
            coeff=LossCoefficients.from_dict(doc.get("coeff", {})),
            shared_thresholds=bool(doc.get("shared_thresholds", False)),
            seed=int(doc.get("seed", 0)),
            aca_cross_terms=bool(doc.get("aca_cross_terms", False)),
        )

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "awa": self.awa.to_dict(),
            "coeff": self.coeff.to_dict(),
            "shared_thresholds": self.shared_thresholds,
            "seed": self.seed,
            "aca_cross_terms": self.aca_cross_terms,
        }


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


def _image(I) -> np.ndarray:
    return np.asarray(I.data if isinstance(I, PillarImage) else I, dtype=np.float64)


def _pre_activation(x: np.ndarray, p: EncoderParams) -> np.ndarray:
    if x.ndim != 3 or x.shape[0] != p.weight.shape[1]:
        raise ShapeMismatch(f"encoder expects {p.weight.shape[1]} input channels, got image {x.shape}")
    return np.einsum("oc,chw->ohw", p.weight, x) + p.bias[:, None, None]


def encode(I, p: EncoderParams) -> np.ndarray:
    """``softplus(W @ I[:, h, w] + b)`` at every cell."""
    return np.logaddexp(0.0, _pre_activation(_image(I), p))


def encode_vjp(I, p: EncoderParams, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    x = _image(I)
    z = _pre_activation(x, p)
    dz = grad_out * (1.0 / (1.0 + np.exp(-z)))
    return {
        "weight": np.einsum("ohw,chw->oc", dz, x),
        "bias": dz.sum(axis=(1, 2)),
        "I": np.einsum("oc,ohw->chw", p.weight, dz),
    }


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


def _stack(features) -> np.ndarray:
    feats = [np.asarray(f, dtype=np.float64) for f in features]
    if not feats:
        raise EmptyAgentList("fusion needs at least one agent")
    shape = feats[0].shape
    if any(f.shape != shape for f in feats) or len(shape) != 3:
        raise ShapeMismatch("all agent features must share one C x H x W shape")
    return np.stack(feats)


def _attention(F: np.ndarray, q: float) -> tuple[np.ndarray, np.ndarray]:
    C = F.shape[1]
    energy = (F * F).sum(axis=1) / C           # N x H x W
    s = q * energy
    e = np.exp(s - s.max(axis=0, keepdims=True))
    w = e / _ordered_sum(e)[None]
    return w, energy


def _ordered_sum(x: np.ndarray) -> np.ndarray:
    """Sum over the agent axis independently of agent order, bit for bit."""
    if x.shape[0] <= 2:
        # two-term float addition is commutative
        return x.sum(axis=0)
    return np.sort(x, axis=0).sum(axis=0)


def fuse(features, p: FusionParams) -> np.ndarray:
    """Per-cell softmax attention over agents, scored by mean squared activation."""
    F = _stack(features)
    w, _ = _attention(F, p.query_scale)
    return _ordered_sum(w[:, None] * F)


def fuse_vjp(features, p: FusionParams, grad_out: np.ndarray) -> tuple[list[np.ndarray], float]:
    """Gradients of a scalar through :func:`fuse` for each agent map and ``query_scale``."""
    F = _stack(features)
    q = p.query_scale
    C = F.shape[1]
    w, energy = _attention(F, q)
    G = np.asarray(grad_out, dtype=np.float64)
    g_w = (G[None] * F).sum(axis=1)                         # N x H x W
    g_s = w * (g_w - (w * g_w).sum(axis=0, keepdims=True))
    dF = w[:, None] * G[None] + g_s[:, None] * (2.0 * q / C) * F
    contrib = (g_s * energy).ravel()
    dq = math.fsum(contrib[contrib != 0].tolist())
    return list(dF), dq


# ---------------------------------------------------------------------------
# dual-flow forward pass
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AgentFlows:
    """Source, range-reduced and augmented pseudo-images of one agent, in the ego frame."""

    agent_id: str
    source: PillarImage
    reduced: PillarImage
    augmented: PillarImage
    trust: TrustMask
    thresholds: tuple[float, float, float]


def prepare_flows(scene: SceneFrame, cfg: PipelineConfig) -> list[AgentFlows]:
    """Augment every agent's cloud in its own sensor frame, then pillarize in the ego frame."""
    shared = None
    if cfg.shared_thresholds:
        shared = sample_thresholds(cfg.awa, derive_seed(cfg.seed, scene.frame_id, "awa-thresholds"))
    flows = []
    for agent in scene.agents:
        out = awa(agent.cloud, cfg.awa, derive_seed(cfg.seed, scene.frame_id, agent.agent_id, "awa"),
                  thresholds=shared)
        to_ego = scene.to_ego_frame(agent)
        I_s = pillarize(transform_points(agent.cloud, to_ego), cfg.grid)
        I_r = pillarize(transform_points(out.reduced, to_ego), cfg.grid)
        I_a = pillarize(transform_points(out.augmented, to_ego), cfg.grid)
        flows.append(AgentFlows(agent.agent_id, I_s, I_r, I_a, trust_region(I_s, I_r), out.thresholds))
    return flows


def alignment_losses(flows: list[AgentFlows], enc: EncoderParams, fus: FusionParams,
                     coeff: LossCoefficients, cross_terms: bool = False) -> LossReport:
    """Weighted alignment objective and its gradients w.r.t. encoder and fusion parameters."""
    if not flows:
        raise EmptyAgentList("no agents to align")
    pat = math.fsum(l_pat(f.source, f.augmented, f.trust).value for f in flows)

    Fs = [encode(f.source, enc) for f in flows]
    Fa = [encode(f.augmented, enc) for f in flows]
    Hs = fuse(Fs, fus)
    Ha = fuse(Fa, fus)
    ffa = l_ffa(Hs, Ha)

    agent_batch = AgentBatch([f.agent_id for f in flows],
                             np.stack([embed(x) for x in Fs]), np.stack([embed(x) for x in Fa]))
    agent = aca_agent(agent_batch, coeff.tau, cross_terms=cross_terms)
    group = aca_group(GroupBatch(embed(Hs)[None], embed(Ha)[None]), coeff.tau)

    parts = {"pat": pat, "ffa": ffa.value, "aca_a": agent.value, "aca_g": group.value}
    value = total_loss(parts, coeff)
    parts["twa"] = math.fsum([coeff.alpha1 * pat, coeff.alpha2 * ffa.value])
    parts["aca"] = math.fsum([coeff.beta1 * agent.value, coeff.beta2 * group.value])

    gHs = coeff.alpha2 * ffa.grads["F_s"] + coeff.beta2 * embed_vjp(Hs, group.grads["source"][0])
    gHa = coeff.alpha2 * ffa.grads["F_a"] + coeff.beta2 * embed_vjp(Ha, group.grads["augmented"][0])
    gFs, dq_s = fuse_vjp(Fs, fus, gHs)
    gFa, dq_a = fuse_vjp(Fa, fus, gHa)

    dW = np.zeros_like(enc.weight)
    db = np.zeros_like(enc.bias)
    for i, f in enumerate(flows):
        for img, F, gF, g_emb in (
            (f.source, Fs[i], gFs[i], agent.grads["source"][i]),
            (f.augmented, Fa[i], gFa[i], agent.grads["augmented"][i]),
        ):
            g = gF + coeff.beta1 * embed_vjp(F, g_emb)
            back = encode_vjp(img, enc, g)
            dW += back["weight"]
            db += back["bias"]
    grads = {"weight": dW, "bias": db, "query_scale": np.array(dq_s + dq_a)}
    return LossReport(value, grads, parts)


def forward_losses(scene: SceneFrame, enc: EncoderParams, fus: FusionParams,
                   cfg: PipelineConfig) -> LossReport:
    """Alignment part of the total loss for one scene, with parameter gradients.

    Deterministic given ``cfg.seed``.
    """
    return alignment_losses(prepare_flows(scene, cfg), enc, fus, cfg.coeff, cfg.aca_cross_terms)


def descend(flows: list[AgentFlows], enc: EncoderParams, fus: FusionParams, coeff: LossCoefficients,
            steps: int = 50, lr: float = 1e-2, cross_terms: bool = False):
    """Plain gradient descent on the alignment objective over fixed flows.

    Returns the final parameters and the objective before every step plus
    after the last one (``steps + 1`` values).
    """
    history = []
    for _ in range(steps):
        rep = alignment_losses(flows, enc, fus, coeff, cross_terms)
        history.append(rep.value)
        enc = EncoderParams(enc.weight - lr * rep.grads["weight"], enc.bias - lr * rep.grads["bias"])
        q = fus.query_scale - lr * float(rep.grads["query_scale"])
        fus = FusionParams(max(q, 1e-6))
    history.append(alignment_losses(flows, enc, fus, coeff, cross_terms).value)
    return enc, fus, history


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


def make_demo_scene(seed: int = 0, n_agents: int = 2, n_points: int = 200,
                    extent: tuple[float, float, float] = (60.0, 25.0, 2.0),
                    frame_id: str = "demo") -> SceneFrame:
    """Random cooperative scene: ego at the origin, other agents scattered around it.

    Each agent sees ``n_points`` returns spread over its own sensor frame;
    the clouds are dense enough near the sensor that range reduction and
    dropout both bite.
    """
    rng = np.random.default_rng(seed)
    agents = []
    for k in range(n_agents):
        if k == 0:
            pose = Pose()
        else:
            pose = Pose(rng.uniform(-20, 20), rng.uniform(-10, 10), 0.0, rng.uniform(-math.pi, math.pi))
        half = np.asarray(extent)
        xyz = rng.uniform(-half, half, size=(n_points, 3)) * rng.uniform(0.2, 1.0, size=(n_points, 1))
        inten = rng.uniform(0.1, 1.0, size=(n_points, 1))
        agents.append(AgentFrame(f"agent{k}" if k else "ego", k == 0, pose, PointCloud(np.hstack([xyz, inten]))))
    boxes = tuple(
        Box3D((rng.uniform(-30, 30), rng.uniform(-15, 15), 0.0), (4.5, 2.0, 1.6), rng.uniform(-math.pi, math.pi))
        for _ in range(3)
    )
    return SceneFrame(frame_id, tuple(agents), boxes)
