"""Parameter-server protocol for particle-based federated learning.

One communication round: the scheduled agent downloads the global
particles, runs L transport steps on the tilted target

    score(q_kde) - score(t_k_kde) + (1/alpha) * (-grad loss_k)

with both kernel density scores frozen at their round-start particle sets,
uploads the moved particles as the new global set, and then distils its own
likelihood approximation by moving its local particles for L_local steps
towards

    score(new global kde) - score(old global kde) + score(old local kde).

Unlearning rounds differ in exactly one place: the loss gradient enters
with the opposite sign, so the scheduled agent pushes the posterior away
from its own data.  Retraining from scratch runs plain transport on the
pooled retained-data target starting from fresh prior draws.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .kernels import KdeConfig, KernelConfig, kde_log_density_grad
from .svgd import AdaGradState, TargetGradient, run_svgd

ROLE_RETAIN = "retain"
ROLE_FORGET = "forget"

# Seed-stream tags separating learning-phase draws from unlearning re-draws.
PHASE_LEARN = 0
PHASE_UNLEARN = 1


class ProtocolError(RuntimeError):
    """A federated round was asked to do something the protocol forbids."""


@dataclass(frozen=True)
class ServerState:
    """Global particle set plus the round counter, updated functionally."""

    global_particles: np.ndarray
    round_index: int = 0
    kde: KdeConfig = field(default_factory=KdeConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    global_opt: AdaGradState | None = None

    def __post_init__(self) -> None:
        particles = np.asarray(self.global_particles, dtype=float)
        if particles.ndim != 2 or particles.shape[0] == 0:
            raise ValueError(f"expected a nonempty (N, d) particle array, got shape {particles.shape}")
        object.__setattr__(self, "global_particles", particles)


@dataclass
class AgentState:
    """One agent: its loss, its local particles, and its role."""

    agent_id: int
    loss: object
    local_particles: np.ndarray
    role: str = ROLE_RETAIN
    distill_opt: AdaGradState | None = None

    def __post_init__(self) -> None:
        if self.agent_id < 1:
            raise ValueError(f"agent ids are 1-based, got {self.agent_id}")
        if self.role not in (ROLE_RETAIN, ROLE_FORGET):
            raise ValueError(f"unknown role {self.role!r}")
        self.local_particles = np.asarray(self.local_particles, dtype=float)


@dataclass(frozen=True)
class ProtocolConfig:
    """Round structure and step-size settings shared by all round types."""

    alpha: float = 1.0
    update_steps: int = 10
    distill_steps: int = 10
    epsilon: float = 0.05
    epsilon_local: float = 0.05
    fudge: float = 1e-6
    schedule: str = "round_robin"
    sequence: tuple[int, ...] | None = None
    include_prior_score: bool = False
    persist_adagrad: bool = False
    prior: object | None = None

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError(f"temperature must be positive, got {self.alpha}")
        if self.update_steps < 0 or self.distill_steps < 0:
            raise ValueError("step counts must be nonnegative")
        if self.schedule not in ("round_robin", "fixed_sequence"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "fixed_sequence" and self.sequence is not None:
            object.__setattr__(self, "sequence", tuple(int(k) for k in self.sequence))


# --- initialization -----------------------------------------------------------


def init_global_particles(prior, n_particles: int, seed: int) -> np.ndarray:
    """Draw the initial global particles from the prior."""
    rng = np.random.default_rng([seed, 0])
    return prior.sample(rng, n_particles)


def init_local_particles(prior, n_particles: int, seed: int, agent_id: int, phase: int = PHASE_LEARN) -> np.ndarray:
    """Draw one agent's local particles with a per-agent, per-phase stream."""
    rng = np.random.default_rng([seed, phase, agent_id])
    return prior.sample(rng, n_particles)


def initialize_states(
    losses: Mapping[int, object],
    config: ProtocolConfig,
    n_particles: int,
    seed: int,
    kde: KdeConfig | None = None,
    kernel: KernelConfig | None = None,
    forget_ids: tuple[int, ...] = (),
) -> tuple[ServerState, dict[int, AgentState]]:
    """Fresh server and agent states for a learning run."""
    if config.prior is None:
        raise ProtocolError("initialization requires a prior in the protocol config")
    unknown = [k for k in forget_ids if k not in losses]
    if unknown:
        raise ProtocolError(f"forget set names unknown agents {unknown}")
    server = ServerState(
        global_particles=init_global_particles(config.prior, n_particles, seed),
        round_index=0,
        kde=kde or KdeConfig(),
        kernel=kernel or KernelConfig(),
    )
    agents = {
        k: AgentState(
            agent_id=k,
            loss=loss,
            local_particles=init_local_particles(config.prior, n_particles, seed, k),
            role=ROLE_FORGET if k in forget_ids else ROLE_RETAIN,
        )
        for k, loss in losses.items()
    }
    return server, agents


def reinitialize_forget_agents(
    agents: Mapping[int, AgentState], config: ProtocolConfig, seed: int
) -> dict[int, AgentState]:
    """Redraw the local particles of every forget-role agent from the prior.

    Retained agents are returned unchanged; the unlearning phase never
    touches their state.
    """
    if config.prior is None:
        raise ProtocolError("reinitialization requires a prior in the protocol config")
    out: dict[int, AgentState] = {}
    for k, agent in agents.items():
        if agent.role == ROLE_FORGET:
            n = agent.local_particles.shape[0]
            fresh = init_local_particles(config.prior, n, seed, k, phase=PHASE_UNLEARN)
            out[k] = dataclasses.replace(agent, local_particles=fresh, distill_opt=None)
        else:
            out[k] = agent
    return out


# --- tilted targets -----------------------------------------------------------


def tilted_grad_learning(
    server: ServerState, agent: AgentState, alpha: float, prior=None
) -> TargetGradient:
    """Score of the learning-round tilted target, frozen at round start.

    The returned closure captures copies of the current global and local
    particle sets, so later moves of either set do not leak into the target.
    """
    global_ref = server.global_particles.copy()
    local_ref = agent.local_particles.copy()
    lam = server.kde.lam
    loss = agent.loss

    def target(theta: np.ndarray) -> np.ndarray:
        grad = kde_log_density_grad(global_ref, theta, lam)
        grad = grad - kde_log_density_grad(local_ref, theta, lam)
        grad = grad + loss.neg_loss_grad(theta, alpha)
        if prior is not None:
            grad = grad + prior.score(theta)
        return grad

    return target


def tilted_grad_unlearning(
    server: ServerState, agent: AgentState, alpha: float, prior=None
) -> TargetGradient:
    """Unlearning variant: the loss gradient enters with flipped sign."""
    if agent.role != ROLE_FORGET:
        raise ProtocolError(f"agent {agent.agent_id} is not in the forget set")
    global_ref = server.global_particles.copy()
    local_ref = agent.local_particles.copy()
    lam = server.kde.lam
    loss = agent.loss

    def target(theta: np.ndarray) -> np.ndarray:
        grad = kde_log_density_grad(global_ref, theta, lam)
        grad = grad - kde_log_density_grad(local_ref, theta, lam)
        grad = grad - loss.neg_loss_grad(theta, alpha)
        if prior is not None:
            grad = grad + prior.score(theta)
        return grad

    return target


def distill_target_grad(
    new_global: np.ndarray, old_global: np.ndarray, old_local: np.ndarray, kde: KdeConfig
) -> TargetGradient:
    """Score of the distillation target for the scheduled agent's particles."""
    new_ref = np.asarray(new_global, dtype=float).copy()
    old_ref = np.asarray(old_global, dtype=float).copy()
    local_ref = np.asarray(old_local, dtype=float).copy()
    lam = kde.lam

    def target(theta: np.ndarray) -> np.ndarray:
        grad = kde_log_density_grad(new_ref, theta, lam)
        grad = grad - kde_log_density_grad(old_ref, theta, lam)
        grad = grad + kde_log_density_grad(local_ref, theta, lam)
        return grad

    return target


# --- rounds -------------------------------------------------------------------


def _lookup_agent(agents: Mapping[int, AgentState], k: int) -> AgentState:
    try:
        return agents[k]
    except KeyError:
        raise ProtocolError(f"scheduled agent {k} does not exist") from None


def _support_projection(config: ProtocolConfig) -> Callable[[np.ndarray], np.ndarray] | None:
    if config.prior is None:
        return None
    return config.prior.clamp


def _round(
    server: ServerState,
    agents: Mapping[int, AgentState],
    k: int,
    config: ProtocolConfig,
    target_builder,
) -> tuple[ServerState, AgentState]:
    agent = _lookup_agent(agents, k)
    old_global = server.global_particles
    old_local = agent.local_particles
    project = _support_projection(config)

    prior = config.prior if config.include_prior_score else None
    target = target_builder(server, agent, config.alpha, prior)
    global_opt = server.global_opt
    if not config.persist_adagrad or global_opt is None:
        global_opt = AdaGradState(epsilon=config.epsilon, fudge=config.fudge)
    new_global = run_svgd(
        old_global, target, config.update_steps, global_opt, server.kernel, project=project
    )

    distill = distill_target_grad(new_global, old_global, old_local, server.kde)
    distill_opt = agent.distill_opt
    if not config.persist_adagrad or distill_opt is None:
        distill_opt = AdaGradState(epsilon=config.epsilon_local, fudge=config.fudge)
    new_local = run_svgd(
        old_local, distill, config.distill_steps, distill_opt, server.kernel, project=project
    )

    new_server = dataclasses.replace(
        server,
        global_particles=new_global,
        round_index=server.round_index + 1,
        global_opt=global_opt if config.persist_adagrad else None,
    )
    new_agent = dataclasses.replace(
        agent,
        local_particles=new_local,
        distill_opt=distill_opt if config.persist_adagrad else None,
    )
    return new_server, new_agent


def learning_round(
    server: ServerState, agents: Mapping[int, AgentState], k: int, config: ProtocolConfig
) -> tuple[ServerState, AgentState]:
    """Run one learning round with scheduled agent ``k``.

    Returns the new server state and the updated agent; inputs are not
    mutated, and no other agent's state is touched.
    """
    return _round(server, agents, k, config, tilted_grad_learning)


def unlearning_round(
    server: ServerState, agents: Mapping[int, AgentState], k: int, config: ProtocolConfig
) -> tuple[ServerState, AgentState]:
    """Run one unlearning round; ``k`` must belong to the forget set."""
    return _round(server, agents, k, config, tilted_grad_unlearning)


def schedule(config: ProtocolConfig, round_index: int, eligible) -> int:
    """Pick the agent for a round.

    ``round_robin`` cycles the sorted eligible ids; ``fixed_sequence`` reads
    the configured sequence and errors when it runs out or names an
    ineligible agent.
    """
    ids = sorted(int(k) for k in eligible)
    if not ids:
        raise ProtocolError("no eligible agents to schedule")
    if round_index < 0:
        raise ProtocolError(f"round index must be nonnegative, got {round_index}")
    if config.schedule == "round_robin":
        return ids[round_index % len(ids)]
    if config.sequence is None or round_index >= len(config.sequence):
        raise ProtocolError(f"fixed schedule exhausted at round {round_index}")
    k = config.sequence[round_index]
    if k not in ids:
        raise ProtocolError(f"scheduled agent {k} is not eligible")
    return k


# --- retraining ---------------------------------------------------------------


def pooled_target(losses, alpha: float, prior) -> TargetGradient:
    """Score of the full posterior over the pooled losses.

    With no losses this is the prior score alone, so transport degenerates
    to prior sampling with kernel repulsion.
    """
    losses = tuple(losses)

    def target(theta: np.ndarray) -> np.ndarray:
        grad = np.asarray(prior.score(theta), dtype=float)
        for loss in losses:
            grad = grad + loss.neg_loss_grad(theta, alpha)
        return grad

    return target


def centralized_round(
    server: ServerState, losses, config: ProtocolConfig
) -> ServerState:
    """One retraining round: ``update_steps`` transport steps on the pooled target."""
    if config.prior is None:
        raise ProtocolError("retraining requires a prior in the protocol config")
    target = pooled_target(losses, config.alpha, config.prior)
    global_opt = server.global_opt
    if not config.persist_adagrad or global_opt is None:
        global_opt = AdaGradState(epsilon=config.epsilon, fudge=config.fudge)
    new_global = run_svgd(
        server.global_particles,
        target,
        config.update_steps,
        global_opt,
        server.kernel,
        project=_support_projection(config),
    )
    return dataclasses.replace(
        server,
        global_particles=new_global,
        round_index=server.round_index + 1,
        global_opt=global_opt if config.persist_adagrad else None,
    )


def retrain_from_scratch(
    retained_losses: Mapping[int, object],
    config: ProtocolConfig,
    n_particles: int,
    rounds: int,
    seed: int,
    kde: KdeConfig | None = None,
    kernel: KernelConfig | None = None,
    mode: str = "centralized",
) -> ServerState:
    """Retrain on the retained losses only, from fresh prior draws.

    ``centralized`` pools all retained losses into one target; ``federated``
    replays the learning protocol over the retained agents.  Federated
    retraining with an empty retained set cannot schedule anyone and is a
    protocol error; centralized retraining then samples the prior.
    """
    if config.prior is None:
        raise ProtocolError("retraining requires a prior in the protocol config")
    if mode not in ("centralized", "federated"):
        raise ValueError(f"unknown retrain mode {mode!r}")
    if rounds < 0:
        raise ValueError(f"round count must be nonnegative, got {rounds}")

    if mode == "centralized":
        server = ServerState(
            global_particles=init_global_particles(config.prior, n_particles, seed),
            round_index=0,
            kde=kde or KdeConfig(),
            kernel=kernel or KernelConfig(),
        )
        losses = tuple(retained_losses[k] for k in sorted(retained_losses))
        for _ in range(rounds):
            server = centralized_round(server, losses, config)
        return server

    if not retained_losses:
        raise ProtocolError("federated retraining needs at least one retained agent")
    server, agents = initialize_states(
        retained_losses, config, n_particles, seed, kde=kde, kernel=kernel
    )
    for r in range(rounds):
        k = schedule(config, r, agents.keys())
        server, agents[k] = learning_round(server, agents, k, config)
    return server
