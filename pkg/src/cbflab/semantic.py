"""Structured context -> safety parameters and region barriers.

A fixed feature map (max severity, mean confidence, terrain one-hot) feeds
linear heads under softplus, so alpha and kappa are strictly positive for
any finite weights. Hazard regions become signed-distance barriers
h_s(x) = d(x, region) - r with margin r = r_base + r_sev * severity.
Arbitration keeps physical barriers slack-exempt and admits semantic
barriers as slack-eligible rows weighted by confidence; low-confidence
regions stay advisory (meta loss only, never a QP row).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .barriers import Barrier, CompositeBarrier, SOFT

TERRAIN_CLASSES = ("nominal", "slippery", "soft", "rubble", "unknown")


class DescriptorError(ValueError):
    """Geometrically or numerically invalid context descriptor."""


@dataclass(frozen=True)
class HazardRegion:
    shape: str                  # "circle" | "polygon"
    params: dict                # circle: center, radius; polygon: vertices
    severity: float = 0.5
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.severity <= 1.0 or not 0.0 <= self.confidence <= 1.0:
            raise DescriptorError("severity and confidence must lie in [0, 1]")
        if self.shape == "circle":
            if float(self.params.get("radius", 0.0)) <= 0.0:
                raise DescriptorError("circle radius must be positive")
        elif self.shape == "polygon":
            verts = np.asarray(self.params.get("vertices", ()), dtype=float)
            if verts.ndim != 2 or verts.shape[0] < 3 or verts.shape[1] != 2:
                raise DescriptorError("polygon needs >= 3 planar vertices")
            if _self_intersects(verts):
                raise DescriptorError("polygon must not self-intersect")
        else:
            raise DescriptorError(f"unknown region shape {self.shape!r}")


@dataclass(frozen=True)
class Directive:
    kind: str                   # keep_out | keep_distance | slow_zone
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("keep_out", "keep_distance", "slow_zone"):
            raise DescriptorError(f"unknown directive {self.kind!r}")


@dataclass(frozen=True)
class ContextDescriptor:
    hazard_regions: tuple[HazardRegion, ...] = ()
    terrain: str = "nominal"
    directives: tuple[Directive, ...] = ()

    def __post_init__(self):
        if self.terrain not in TERRAIN_CLASSES:
            raise DescriptorError(f"terrain must be one of {TERRAIN_CLASSES}")


@dataclass(frozen=True)
class EncoderWeights:
    """Linear heads over the feature map, squashed by softplus."""

    w_alpha: np.ndarray = None
    b_alpha: float = 0.5
    w_kappa: np.ndarray = None
    b_kappa: float = 0.5
    r_base: float = 0.1
    r_sev: float = 0.4
    velocity_gain: float = 0.0  # approach-speed coupling of region barriers

    def __post_init__(self):
        dim = 2 + len(TERRAIN_CLASSES)
        if self.w_alpha is None:
            object.__setattr__(self, "w_alpha", np.zeros(dim))
        if self.w_kappa is None:
            w = np.zeros(dim)
            w[0] = 1.0  # severity raises risk aversion by default
            object.__setattr__(self, "w_kappa", w)
        if self.r_sev < 0 or self.r_base < 0:
            raise DescriptorError("margins must be nonnegative")


@dataclass(frozen=True)
class SemanticOutput:
    region_barriers: tuple[Barrier, ...]
    alpha: float
    kappa: float
    margins: tuple[float, ...]
    confidences: tuple[float, ...]


def softplus(x: float) -> float:
    # overflow-safe: softplus(x) = max(x, 0) + log1p(exp(-|x|))
    x = float(x)
    return max(x, 0.0) + float(np.log1p(np.exp(-abs(x))))


def context_features(ctx: ContextDescriptor) -> np.ndarray:
    """[max severity, mean confidence, terrain one-hot]; slow_zone directives
    count as severity 0.5 pressure on the severity channel."""
    sev = max([r.severity for r in ctx.hazard_regions], default=0.0)
    for d in ctx.directives:
        if d.kind == "slow_zone":
            sev = max(sev, float(d.params.get("severity", 0.5)))
    conf = float(np.mean([r.confidence for r in ctx.hazard_regions])) if ctx.hazard_regions else 1.0
    onehot = np.zeros(len(TERRAIN_CLASSES))
    onehot[TERRAIN_CLASSES.index(ctx.terrain)] = 1.0
    return np.concatenate([[sev, conf], onehot])


def _point_segment(p, a, b):
    """(closest point, squared distance) from p to segment ab."""
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0.0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    c = a + t * ab
    d = p - c
    return c, float(d @ d)


def _self_intersects(verts: np.ndarray) -> bool:
    def cross2(a, b):
        return a[0] * b[1] - a[1] * b[0]

    def seg_cross(p1, p2, p3, p4):
        d1 = cross2(p4 - p3, p1 - p3)
        d2 = cross2(p4 - p3, p2 - p3)
        d3 = cross2(p2 - p1, p3 - p1)
        d4 = cross2(p2 - p1, p4 - p1)
        return (d1 * d2 < 0) and (d3 * d4 < 0)

    m = verts.shape[0]
    for i in range(m):
        for j in range(i + 1, m):
            if abs(i - j) in (0, 1) or (i == 0 and j == m - 1):
                continue
            if seg_cross(verts[i], verts[(i + 1) % m], verts[j], verts[(j + 1) % m]):
                return True
    return False


def _point_in_polygon(p, verts) -> bool:
    inside = False
    m = verts.shape[0]
    j = m - 1
    for i in range(m):
        yi, yj = verts[i, 1], verts[j, 1]
        if (yi > p[1]) != (yj > p[1]):
            x_cross = verts[i, 0] + (p[1] - yi) / (yj - yi) * (verts[j, 0] - verts[i, 0])
            if p[0] < x_cross:
                inside = not inside
        j = i
    return inside


def region_barrier(region: HazardRegion, margin: float, pos_idx, n: int,
                   *, id: str = "", role: str = SOFT,
                   vel_idx=None, velocity_gain: float = 0.0) -> Barrier:
    """Signed-distance barrier h = d(x, region) - margin, positive outside.

    Circles carry the exact curvature Hessian (I - nn^T)/||p-o||; polygon
    barriers have zero Hessian (flat facets), with the lowest-index facet
    normal at vertex ties. A positive velocity_gain adds the approach-speed
    term kv n^T v (circle regions only), which gives the barrier a nonzero
    input row on double-integrator plants.
    """
    if margin < 0:
        raise DescriptorError("margin must be nonnegative")
    idx = np.asarray(pos_idx, dtype=int)
    kv = float(velocity_gain)
    if region.shape == "circle":
        o = np.asarray(region.params["center"], dtype=float)
        rad = float(region.params["radius"])
        vdx = None if (vel_idx is None or kv == 0.0) else np.asarray(vel_idx, dtype=int)[: idx.size]

        def ev(xi):
            p = xi[idx]
            d = p - o
            dist = float(np.linalg.norm(d))
            grad = np.zeros(n)
            hess = np.zeros((n, n))
            if dist < 1e-12:
                normal = np.zeros(idx.size)
                normal[0] = 1.0
                grad[idx] = normal
                return -rad - margin, grad, hess
            normal = d / dist
            proj = np.eye(idx.size) - np.outer(normal, normal)
            curv = proj / dist
            grad[idx] = normal
            hess[np.ix_(idx, idx)] = curv
            h = dist - rad - margin
            if vdx is None:
                return h, grad, hess
            v = xi[vdx]
            nv = float(normal @ v)
            h += kv * nv
            grad[idx] += kv * (proj @ v) / dist
            grad[vdx] += kv * normal
            # d^2/dp^2 of n^T v = (3 nv n n^T - v n^T - n v^T - nv I)/dist^2
            hpp = (3.0 * nv * np.outer(normal, normal) - np.outer(v, normal)
                   - np.outer(normal, v) - nv * np.eye(idx.size)) / (dist * dist)
            hess[np.ix_(idx, idx)] += kv * hpp
            hess[np.ix_(idx, vdx)] += kv * curv
            hess[np.ix_(vdx, idx)] += kv * curv
            return h, grad, hess

    else:
        verts = np.asarray(region.params["vertices"], dtype=float)
        # normalize winding to CCW so boundary normals point outward
        area2 = float(np.sum(verts[:, 0] * np.roll(verts[:, 1], -1)
                             - np.roll(verts[:, 0], -1) * verts[:, 1]))
        if area2 < 0:
            verts = verts[::-1].copy()

        def ev(xi):
            p = xi[idx]
            best = None
            best_facet = 0
            m = verts.shape[0]
            for i in range(m):
                c, d2 = _point_segment(p, verts[i], verts[(i + 1) % m])
                if best is None or d2 < best[1] - 1e-15:
                    best = (c, d2)
                    best_facet = i
            c, d2 = best
            dist = float(np.sqrt(d2))
            inside = _point_in_polygon(p, verts)
            grad = np.zeros(n)
            if dist < 1e-12:
                # on the boundary (or at a vertex): outward normal of the
                # nearest facet, lowest index on ties
                e = verts[(best_facet + 1) % m] - verts[best_facet]
                normal = np.array([e[1], -e[0]])
                normal /= max(np.linalg.norm(normal), 1e-12)
            else:
                normal = (p - c) / dist if not inside else (c - p) / dist
            grad[idx] = normal
            sd = dist if not inside else -dist
            return sd - margin, grad, np.zeros((n, n))

    return Barrier(id or f"region_{region.shape}", role, ev, region.confidence)


def encode_context(ctx: ContextDescriptor, weights: EncoderWeights, pos_idx, n: int,
                   vel_idx=None) -> SemanticOutput:
    """Deterministic encoder: softplus heads for (alpha, kappa), one signed
    distance barrier per hazard region / keep-out directive."""
    phi = context_features(ctx)
    alpha = softplus(float(weights.w_alpha @ phi) + weights.b_alpha)
    kappa = softplus(float(weights.w_kappa @ phi) + weights.b_kappa)
    kv = weights.velocity_gain
    barriers = []
    margins = []
    confidences = []
    for k, region in enumerate(ctx.hazard_regions):
        r = weights.r_base + weights.r_sev * region.severity
        barriers.append(region_barrier(region, r, pos_idx, n, id=f"hazard_{k}",
                                       vel_idx=vel_idx, velocity_gain=kv))
        margins.append(r)
        confidences.append(region.confidence)
    for k, d in enumerate(ctx.directives):
        if d.kind in ("keep_out", "keep_distance"):
            reg = HazardRegion("circle", {"center": d.params["center"],
                                          "radius": float(d.params.get("radius", d.params.get("distance")))},
                               severity=float(d.params.get("severity", 0.5)),
                               confidence=float(d.params.get("confidence", 1.0)))
            r = float(d.params.get("margin", 0.0))
            barriers.append(region_barrier(reg, r, pos_idx, n, id=f"{d.kind}_{k}",
                                           vel_idx=vel_idx, velocity_gain=kv))
            margins.append(r)
            confidences.append(reg.confidence)
    return SemanticOutput(tuple(barriers), alpha, kappa, tuple(margins), tuple(confidences))


def arbitrate(hard: list[Barrier], soft: SemanticOutput | None, *, beta: float = 10.0,
              slack_weight: float = 1e4, confidence_threshold: float = 0.3):
    """Merge hard and semantic barriers into a composite plus slack policy.

    Returns (composite, row_weights, advisory): hard rows are slack-exempt
    (np.inf), admitted soft rows carry slack_weight * confidence, and soft
    barriers below the confidence threshold are excluded from the QP
    entirely (advisory list; they still feed the meta loss).
    """
    if not hard:
        raise ValueError("at least one hard barrier is required")
    members = list(hard)
    row_weights = [np.inf] * len(hard)
    advisory: list[Barrier] = []
    if soft is not None:
        for b in soft.region_barriers:
            if b.confidence < confidence_threshold:
                advisory.append(b)
            else:
                members.append(b)
                row_weights.append(slack_weight * b.confidence)
    return CompositeBarrier(tuple(members), beta), np.array(row_weights), advisory
