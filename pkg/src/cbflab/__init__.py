"""Risk-aware stochastic control-barrier safety filtering lab.

Library + CLI for variance-aware CBF-QP safety filtering on desk-scale
stochastic plants: Euler-Maruyama plant models, log-sum-exp composite
barriers with Ito correction, a dense active-set QP solver with slack
relaxation and warm starting, implicit KKT differentiation, meta-adaptive
risk calibration, semantic constraint conditioning, a multi-agent
extension, and a Monte-Carlo episode/metrics/sweep harness.
"""

from .plants import (
    PlantModel,
    PlantDomainError,
    make_plant,
    eval_dynamics,
    fuse_covariance,
    step_em,
    make_rng,
)
from .barriers import (
    Barrier,
    CompositeBarrier,
    BarrierStats,
    halfspace,
    circle_clearance,
    ellipse_clearance,
    box_limit,
    eval_barrier,
    compose_lse,
    composite_stats,
    constraint_row,
)
from .qp import (
    SafetyQP,
    QPSolution,
    InfeasibleQPError,
    QPBuildError,
    build_qp,
    solve_qp,
    solve_filter_step,
)
from .kkt import (
    KKTSensitivity,
    DegenerateActiveSetError,
    kkt_differentiate,
    finite_diff,
)
from .adapt import (
    RiskParams,
    MetaConfig,
    MetaAdapter,
    safe_hinge,
    barrier_penalty,
    meta_loss,
    meta_update,
    smooth_apply,
)
from .semantic import (
    HazardRegion,
    Directive,
    ContextDescriptor,
    EncoderWeights,
    SemanticOutput,
    DescriptorError,
    encode_context,
    region_barrier,
    arbitrate,
)
from .team import TeamScenario, team_barrier, decentralized_step, run_team_episode
from .scenario import Scenario, ScenarioError, load_scenario, apply_overrides
from .episode import EpisodeTrace, run_episode
from .metrics import Metrics, compute_metrics, aggregate_metrics, wilson_interval
from .sweep import ReportTable, sweep

__version__ = "0.1.0"
