"""Episode execution: the per-step control loop and disturbance injection.

Per step: refresh context, fuse the covariance schedule, evaluate barrier
stats at the controller's state estimate, assemble risk-aware rows, solve
the filter QP (warm-started), feed the meta learner, smooth the applied
risk parameters, then advance the true plant state by one Euler-Maruyama
step. Every random draw comes from named streams of the episode seed, so a
(scenario, seed) pair reproduces its trace bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, replace as _replace

import numpy as np

from . import adapt, semantic
from .barriers import (HARD, Barrier, box_limit, circle_clearance, compose_lse,
                       constraint_row, ellipse_clearance, halfspace, single_stats,
                       composite_stats)
from .kkt import rows_sensitivity
from .plants import eval_dynamics, em_increment, fuse_covariance, make_plant, make_rng, sqrt_psd
from .qp import build_qp, solve_qp
from .scenario import Scenario


@dataclass
class EpisodeTrace:
    """Per-step log of one episode (arrays of length horizon)."""

    t: np.ndarray
    xi: np.ndarray            # true state, H x n
    u_ref: np.ndarray         # H x n_u
    u_star: np.ndarray        # H x n_u
    h_barriers: np.ndarray    # H x M (member barrier values at the true state)
    h_c: np.ndarray           # hard composite value
    sigma_h: np.ndarray
    alpha: np.ndarray
    kappa: np.ndarray
    slack: np.ndarray         # max slack over rows
    slack_hard: np.ndarray    # max slack over hard-barrier rows (always 0)
    iterations: np.ndarray
    violation: np.ndarray     # hard composite < 0
    semantic_violation: np.ndarray
    tracking_error: np.ndarray
    status: list
    margin: np.ndarray        # realized risk-aware margin at the solved u*
    raw_alpha: np.ndarray
    raw_kappa: np.ndarray

    def __len__(self):
        return self.t.shape[0]


def build_barrier(spec: dict, plant) -> Barrier:
    fam = spec["family"]
    n = plant.n
    role = spec.get("role", HARD)
    kv = float(spec.get("velocity_gain", 0.0))

    def paired_vel(index):
        # velocity partner of one position state, for approach-speed barriers
        pos = list(plant.pos_idx)
        if kv == 0.0 or index not in pos:
            return None
        return (plant.vel_idx[pos.index(index)],)

    if fam == "halfspace":
        idx = spec.get("index", 0)
        return halfspace(idx, spec.get("offset", 0.0), n, sign=spec.get("sign", 1.0),
                         role=role, id=spec.get("id", ""),
                         vel_idx=paired_vel(idx), velocity_gain=kv)
    if fam == "circle_clearance":
        return circle_clearance(spec["center"], spec["radius"], plant.pos_idx, n,
                                role=role, id=spec.get("id", ""),
                                vel_idx=plant.vel_idx if kv else None, velocity_gain=kv)
    if fam == "ellipse_clearance":
        return ellipse_clearance(spec["center"], spec["semi_axes"], plant.pos_idx, n,
                                 role=role, id=spec.get("id", ""),
                                 vel_idx=plant.vel_idx if kv else None, velocity_gain=kv)
    if fam == "box_limit":
        idx = spec.get("index", 0)
        return box_limit(idx, spec["bound"], n, role=role, id=spec.get("id", ""),
                         vel_idx=paired_vel(idx), velocity_gain=kv)
    raise ValueError(f"unknown barrier family {fam!r}")


def make_reference(scn: Scenario, plant):
    """Per-episode closure: (xi, t) -> (u_ref, tracking_error)."""
    ref = scn.reference
    kind = ref.get("kind", "setpoint")
    target0 = np.atleast_1d(np.asarray(ref.get("target", [0.0]), dtype=float))
    gain = float(ref.get("gain", 1.0))
    amp = float(ref.get("amplitude", 1.0))
    freq = float(ref.get("frequency", 0.2))
    pos_list = list(plant.pos_idx)
    name = plant.name
    kd = float(ref.get("damping", 1.0))
    n_u = plant.n_u

    def fn(xi, t):
        target = target0
        if kind == "sine":
            target = target0 + amp * np.sin(2.0 * np.pi * freq * t)
        pos = xi[pos_list]
        err_vec = target[: pos.shape[0]] - pos
        if name == "planar_double_integrator":
            u = gain * err_vec - kd * xi[2:4]
        elif name == "synthetic12":
            u = -gain * xi[:n_u]
            err_vec = pos
        else:
            u = gain * err_vec
        return u[:n_u], float(np.linalg.norm(err_vec))

    return fn


def _reference(scn: Scenario, plant, xi: np.ndarray, t: float) -> tuple[np.ndarray, float]:
    """Nominal control and scalar tracking error for the RMSE metric."""
    return make_reference(scn, plant)(xi, t)


def _noise_scale(scn: Scenario, t: float) -> float:
    scale = scn.noise_scale
    for seg in scn.noise_schedule:
        if seg.get("t0", 0.0) <= t < seg.get("t1", np.inf):
            scale = scale * seg.get("scale", 1.0)
    return scale


def inject_disturbance(event: dict, t: float, dt: float, xi: np.ndarray, plant,
                       sigma_scale: float, drift_scale: float, frozen: bool):
    """Apply one event if it is scheduled at/around t.

    push: adds an impulse to the velocity states at its trigger step.
    friction_collapse: scales drift and inflates the covariance inside its
    window. sensor_dropout: freezes the controller's state estimate.
    Returns (xi, sigma_scale, drift_scale, frozen).
    """
    kind = event.get("kind")
    if kind == "push":
        t0 = float(event.get("t", 0.0))
        if t0 <= t < t0 + dt:
            imp = np.atleast_1d(np.asarray(event.get("impulse", [0.0]), dtype=float))
            xi = xi.copy()
            vel = list(plant.vel_idx)[: imp.shape[0]]
            xi[vel] = xi[vel] + imp[: len(vel)]
    elif kind == "friction_collapse":
        if float(event.get("t0", 0.0)) <= t < float(event.get("t1", np.inf)):
            sigma_scale *= float(event.get("sigma_scale", 4.0))
            drift_scale *= float(event.get("drift_scale", 0.3))
    elif kind == "sensor_dropout":
        if float(event.get("t0", 0.0)) <= t < float(event.get("t1", np.inf)):
            frozen = True
    return xi, sigma_scale, drift_scale, frozen


def _variant_flags(variant: str) -> dict:
    return {
        "full": dict(ito=True, sig=True, meta=True, semantic=True, kappa0=None),
        "det_cbf": dict(ito=False, sig=False, meta=False, semantic=True, kappa0=0.0),
        "robust_margin": dict(ito=False, sig=False, meta=False, semantic=True, kappa0=0.0),
        "no_meta": dict(ito=True, sig=True, meta=False, semantic=True, kappa0=None),
        "no_stochastic": dict(ito=False, sig=False, meta=True, semantic=True, kappa0=None),
        "fixed_params": dict(ito=True, sig=True, meta=False, semantic=False, kappa0=None),
    }[variant]


def _descriptor_from_doc(doc: dict) -> semantic.ContextDescriptor:
    regions = tuple(semantic.HazardRegion(r["shape"], r.get("params", {}),
                                          float(r.get("severity", 0.5)),
                                          float(r.get("confidence", 1.0)))
                    for r in doc.get("hazard_regions", []))
    directives = tuple(semantic.Directive(d["kind"], d.get("params", {}))
                       for d in doc.get("directives", []))
    return semantic.ContextDescriptor(regions, doc.get("terrain", "nominal"), directives)


def run_episode(scn: Scenario, seed: int) -> EpisodeTrace:
    """Run one episode; deterministic per (scenario, seed)."""
    plant = make_plant(scn.plant)
    n, n_u = plant.n, plant.n_u
    hh = scn.horizon
    dt = scn.dt
    flags = _variant_flags(scn.variant)

    rng = make_rng(seed, stream=0)
    noise = rng.standard_normal((hh, n))

    hard = [build_barrier(b, plant) for b in scn.barriers if b.get("role", HARD) == HARD]
    soft_static = tuple(build_barrier(b, plant) for b in scn.barriers
                        if b.get("role", HARD) != HARD)
    if not hard:
        raise ValueError("scenario needs at least one hard barrier")
    beta = scn.lse_beta

    ctx_cfg = scn.context
    ctx_enabled = bool(ctx_cfg.get("enabled", False)) and flags["semantic"]
    ctx_period = float(ctx_cfg.get("period", 0.1))
    conf_threshold = float(ctx_cfg.get("confidence_threshold", 0.3))
    use_ctx_params = bool(ctx_cfg.get("use_params", False))
    enc_weights = None
    ctx_schedule = []
    if ctx_enabled:
        wcfg = ctx_cfg.get("weights", {})
        enc_weights = semantic.EncoderWeights(
            w_alpha=np.asarray(wcfg["w_alpha"], dtype=float) if "w_alpha" in wcfg else None,
            b_alpha=float(wcfg.get("b_alpha", 0.5)),
            w_kappa=np.asarray(wcfg["w_kappa"], dtype=float) if "w_kappa" in wcfg else None,
            b_kappa=float(wcfg.get("b_kappa", 0.5)),
            r_base=float(wcfg.get("r_base", 0.1)),
            r_sev=float(wcfg.get("r_sev", 0.4)),
            velocity_gain=float(wcfg.get("velocity_gain", 0.0)))
        ctx_schedule = ctx_cfg.get("schedule", [])
        if not ctx_schedule and "descriptor" in ctx_cfg:
            ctx_schedule = [{"t": 0.0, "descriptor": ctx_cfg["descriptor"]}]

    # risk parameters and the meta learner
    smoothing = scn.risk.get("smoothing", {})
    if smoothing.get("mode", "asymmetric") == "symmetric":
        gam = float(smoothing.get("gamma", 0.2))
        g_rise = g_fall = gam
    else:
        g_rise = float(smoothing.get("rise", 0.5))
        g_fall = float(smoothing.get("fall", 0.05))
    alpha0 = float(scn.risk.get("alpha0", 1.0))
    kappa0 = float(scn.risk.get("kappa0", 1.0))
    if scn.variant == "fixed_params":
        alpha0 = float(scn.risk.get("fixed_alpha", alpha0))
        kappa0 = float(scn.risk.get("fixed_kappa", kappa0))
    if flags["kappa0"] is not None:
        kappa0 = flags["kappa0"]
    params = adapt.RiskParams(
        alpha0, kappa0,
        alpha_bounds=tuple(scn.risk.get("alpha_bounds", [0.1, 10.0])),
        kappa_bounds=tuple(scn.risk.get("kappa_bounds", [0.0, 5.0])),
        gamma_rise=g_rise, gamma_fall=g_fall)
    mcfg_d = scn.risk.get("meta", {})
    mcfg = adapt.MetaConfig(
        lambda_h=float(mcfg_d.get("lambda_h", 0.1)),
        lambda_s=float(mcfg_d.get("lambda_s", 10.0)),
        lr=float(mcfg_d.get("lr", 0.05)),
        clip_norm=float(mcfg_d.get("clip", 1.0)),
        period=int(mcfg_d.get("period", 10)),
        psi_floor=float(mcfg_d.get("psi_floor", 1e-3)))
    adapter = adapt.MetaAdapter(params, mcfg, enabled=flags["meta"])

    robust_margin = float(scn.risk.get("robust_margin", 0.3)) if scn.variant == "robust_margin" else 0.0

    ctrl = scn.control
    u_lo = np.asarray(ctrl.get("u_min", [-50.0] * n_u), dtype=float) * np.ones(n_u)
    u_hi = np.asarray(ctrl.get("u_max", [50.0] * n_u), dtype=float) * np.ones(n_u)
    r_diag = np.asarray(ctrl.get("R", [1.0] * n_u), dtype=float) * np.ones(n_u)
    q_diag_cfg = ctrl.get("Q")
    q_diag = None if q_diag_cfg is None else np.asarray(q_diag_cfg, dtype=float) * np.ones(n)
    slack_weight = float(ctrl.get("slack_weight", 1e4))
    reg_eps = float(ctrl.get("reg_eps", 1e-4))
    per_constraint = scn.constraint_mode == "per_constraint"

    cov = scn.covariance
    epi = np.atleast_1d(np.asarray(cov.get("epi", 0.0), dtype=float)) * np.ones(n)
    ale = np.atleast_1d(np.asarray(cov.get("ale", 0.0), dtype=float)) * np.ones(n)
    floor = float(cov.get("floor", 0.0))
    ceiling = float(cov.get("ceiling", 1e3))
    scale_target = cov.get("scale_applies_to", "both")
    inject = cov.get("inject", "fused")

    xi = np.asarray(scn.x0, dtype=float).copy()
    if xi.shape != (n,):
        raise ValueError(f"x0 has dim {xi.shape}, plant needs {n}")
    estimate = xi.copy()

    n_members_max = len(hard) + len(soft_static) + 8
    trace = EpisodeTrace(
        t=np.arange(hh) * dt, xi=np.zeros((hh, n)), u_ref=np.zeros((hh, n_u)),
        u_star=np.zeros((hh, n_u)), h_barriers=np.full((hh, n_members_max), np.nan),
        h_c=np.zeros(hh), sigma_h=np.zeros(hh), alpha=np.zeros(hh), kappa=np.zeros(hh),
        slack=np.zeros(hh), slack_hard=np.zeros(hh), iterations=np.zeros(hh, dtype=int),
        violation=np.zeros(hh, dtype=bool), semantic_violation=np.zeros(hh, dtype=bool),
        tracking_error=np.zeros(hh), status=[], margin=np.zeros(hh),
        raw_alpha=np.zeros(hh), raw_kappa=np.zeros(hh))

    def rebuild_composite(sem_out):
        combined = sem_out
        if soft_static:
            if combined is None:
                combined = semantic.SemanticOutput(soft_static, 0.0, 0.0, (),
                                                   tuple(b.confidence for b in soft_static))
            else:
                combined = semantic.SemanticOutput(
                    combined.region_barriers + soft_static, combined.alpha, combined.kappa,
                    combined.margins, combined.confidences + tuple(b.confidence for b in soft_static))
        return semantic.arbitrate(hard, combined, beta=beta, slack_weight=slack_weight,
                                  confidence_threshold=conf_threshold)

    composite, row_weights, advisory = rebuild_composite(None)
    sem_out = None
    last_ctx_refresh = -np.inf
    active_descriptor = None
    warm = None
    last_sigma_key = None
    sqrt_cache = None
    sigma_ctrl = None
    n_hard = len(hard)
    reference = make_reference(scn, plant)

    # template QP, validated once; per-step instances only swap u_ref/rows
    _, g0 = eval_dynamics(plant, estimate, 0.0)
    qp_template = build_qp(np.zeros(n_u), g0, r_diag, q_diag,
                           [(np.zeros(n_u), 0.0)], (u_lo, u_hi), slack_weight, reg_eps, None)

    for k in range(hh):
        t = k * dt

        sigma_scale = 1.0
        drift_scale = 1.0
        frozen = False
        for ev in scn.disturbances:
            xi, sigma_scale, drift_scale, frozen = inject_disturbance(
                ev, t, dt, xi, plant, sigma_scale, drift_scale, frozen)
        if not frozen:
            estimate = xi.copy()

        # context refresh on its own clock
        if ctx_enabled and t - last_ctx_refresh >= ctx_period - 1e-12:
            desc_doc = None
            for sw in ctx_schedule:
                if float(sw.get("t", 0.0)) <= t:
                    desc_doc = sw.get("descriptor")
            if desc_doc is not None and desc_doc is not active_descriptor:
                active_descriptor = desc_doc
                ctx = _descriptor_from_doc(desc_doc)
                sem_out = semantic.encode_context(ctx, enc_weights, plant.pos_idx, n,
                                                  vel_idx=plant.vel_idx)
                if use_ctx_params:
                    params.alpha = float(np.clip(sem_out.alpha, *params.alpha_bounds))
                    params.kappa = float(np.clip(sem_out.kappa, *params.kappa_bounds))
                n_before = len(composite.members)
                composite, row_weights, advisory = rebuild_composite(sem_out)
                if len(composite.members) != n_before:
                    warm = None  # row layout changed; stale active set
            last_ctx_refresh = t

        # covariance schedule; fusion and the noise factor only recompute
        # when the schedule moves to a new segment
        s = _noise_scale(scn, t) * sigma_scale
        key = (s, scale_target, inject)
        if key != last_sigma_key:
            s_epi = s if scale_target in ("both", "epistemic") else 1.0
            s_ale = s if scale_target in ("both", "aleatoric") else 1.0
            sig_epi = np.diag(epi * s_epi ** 2)
            sig_ale = np.diag(ale * s_ale ** 2)
            sigma_ctrl = fuse_covariance(sig_epi, sig_ale, floor, ceiling)
            sigma_true = sig_ale if inject == "aleatoric" else sigma_ctrl
            sqrt_cache = sqrt_psd(sigma_true)
            last_sigma_key = key

        f_est, g_est = eval_dynamics(plant, estimate, t)
        u_ref, _ = reference(estimate, t)
        u_ref = np.clip(u_ref, u_lo, u_hi)
        a_now, k_now = adapter.applied()

        if per_constraint:
            stats_list = [single_stats(b, estimate, f_est, g_est, sigma_ctrl)
                          for b in composite.members]
            weights = row_weights
        else:
            stats_list = [composite_stats(composite, estimate, f_est, g_est, sigma_ctrl)]
            weights = np.array([np.inf])
        if not flags["ito"] or not flags["sig"]:
            stats_list = [_replace(st, ito=st.ito if flags["ito"] else 0.0,
                                   sigma_h=st.sigma_h if flags["sig"] else 0.0)
                          for st in stats_list]
        rows_a = np.empty((len(stats_list), n_u))
        rows_b = np.empty(len(stats_list))
        for j, st in enumerate(stats_list):
            a_row, b_val = constraint_row(st, a_now, k_now)
            rows_a[j] = a_row
            rows_b[j] = b_val + robust_margin
        if weights is None:
            weights = np.full(len(stats_list), slack_weight)
        qp = _replace(qp_template, u_ref=u_ref, rows_a=rows_a, rows_b=rows_b,
                      row_weights=weights)
        sol = solve_qp(qp, warm=warm)
        warm = sol

        # hinge margin (no Ito term, matching the hinge definition): the
        # most critical row in per-constraint mode, the composite otherwise
        margins = [st.drift + float(st.input_row @ sol.u_star) + a_now * st.h_c
                   - k_now * st.sigma_h for st in stats_list]
        j_crit = int(np.argmin(margins)) if len(margins) > 1 else 0
        margin = margins[j_crit]
        st0 = stats_list[j_crit]
        hard_est = st0.h_c if n_hard == len(composite.members) and not per_constraint \
            else compose_lse([b.eval(estimate)[0] for b in hard], beta)[0]

        if flags["meta"]:
            slacky = sol.status != "optimal" or bool((sol.slack > 1e-10).any())
            # tolerance: active rows have margin 0 up to roundoff
            violating = slacky or margin < -1e-9 or hard_est < 0.0
            du_da = du_dk = None
            if not slacky:
                du_db = rows_sensitivity(qp, sol)
                if du_db is not None:
                    db_da = np.array([-st.h_c for st in stats_list])
                    db_dk = np.array([st.sigma_h for st in stats_list])
                    du_da = du_db @ db_da
                    du_dk = du_db @ db_dk
            grad = adapt.step_meta_gradient(
                sol.u_star, u_ref, du_da, du_dk, violating, st0.h_c, st0.sigma_h, mcfg)
            adapter.record(grad)
            adapter.maybe_update()
        adapter.smooth()

        # record against the true state
        member_vals = [b.eval(xi)[0] for b in composite.members]
        h_hard, _ = compose_lse(member_vals[:n_hard], beta)
        m_rec = min(len(member_vals), n_members_max)
        trace.xi[k] = xi
        trace.u_ref[k] = u_ref
        trace.u_star[k] = sol.u_star
        trace.h_barriers[k, :m_rec] = member_vals[:m_rec]
        trace.h_c[k] = h_hard
        trace.sigma_h[k] = st0.sigma_h
        trace.alpha[k] = a_now
        trace.kappa[k] = k_now
        trace.raw_alpha[k] = params.alpha
        trace.raw_kappa[k] = params.kappa
        trace.slack[k] = float(sol.slack.max()) if sol.slack.size else 0.0
        if per_constraint:
            trace.slack_hard[k] = float(sol.slack[:n_hard].max()) if n_hard else 0.0
        else:
            trace.slack_hard[k] = trace.slack[k]  # the composite row is hard-exempt
        trace.iterations[k] = sol.iterations
        trace.violation[k] = h_hard < 0.0
        soft_vals = member_vals[n_hard:]
        trace.semantic_violation[k] = any(v < 0.0 for v in soft_vals) or \
            any(b.eval(xi)[0] < 0.0 for b in advisory)
        _, err = reference(xi, t)
        trace.tracking_error[k] = err
        trace.status.append(sol.status)
        trace.margin[k] = margin

        # plant step from the true state
        f_true, g_true = eval_dynamics(plant, xi, t)
        xi = xi + em_increment(f_true * drift_scale, g_true, sol.u_star, sqrt_cache, dt, noise[k])

    return trace
