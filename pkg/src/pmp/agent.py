"""Per-edge reasoning agents, straight-through Gumbel-softmax sampling and rollouts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import GraphState, GraphTopology
from .messages import MessageFunctionBank, NodeUpdater, policy_update
from .nn import MLP, Embedding, GRUCell, Module

PRIOR, PROPOSAL = "prior", "proposal"


class AgentParams(Module):
    """Shared agent weights: recurrent cell ``B``, scoring network ``A`` and the
    label embedding that lets the proposal policy see targets.

    ``global_read`` controls how the scorer sees the summed edge memory
    ``h_u``: ``"sum"`` feeds it as is, ``"mean"`` divides it by the graph's
    edge count so its scale does not grow with the graph.
    """

    def __init__(self, rng: np.random.Generator, d_node: int, K: int, hidden: int = 32,
                 n_classes: int = 1, d_target: int = 16, d_score: int | None = None,
                 global_read: str = "mean"):
        if global_read not in ("sum", "mean"):
            raise ValueError(f"global_read must be 'sum' or 'mean', got {global_read!r}")
        self.K, self.hidden, self.d_target = K, hidden, d_target
        self.global_read = global_read
        d_summary = 3 * d_node + 2 * d_target
        self.cell = GRUCell(rng, d_summary, hidden)
        self.scorer = MLP(rng, [d_summary + 2 * hidden, d_score or d_node, K + 1])
        self.target_embedding = Embedding(rng, n_classes, d_target)


@dataclass(frozen=True, eq=False)
class EdgeAgentState:
    h: Tensor    # |E| x H
    h_u: Tensor  # n_graphs x H, row sums of h per member graph

    @classmethod
    def zeros(cls, topo: GraphTopology, hidden: int, dtype=None) -> "EdgeAgentState":
        dtype = dtype or ad.default_dtype()
        return cls(Tensor(np.zeros((topo.n_edges, hidden), dtype=dtype)),
                   Tensor(np.zeros((topo.n_graphs, hidden), dtype=dtype)))


def agent_step(state: GraphState, topo: GraphTopology, agent: EdgeAgentState, params: AgentParams,
               mode: str = PRIOR, targets=None, target_mask=None) -> tuple[EdgeAgentState, Tensor]:
    """Advance every edge's agent one step and return its action distribution.

    Returns ``probs`` (|E| x (K+1)) with ``probs = (softmax(scores) + 1) / (K + 2)``,
    so every entry is at least ``1 / (K + 2)``.
    """
    if mode == PROPOSAL:
        if targets is None:
            raise ValueError("proposal mode needs targets")
        emb = params.target_embedding(np.asarray(targets, dtype=np.int64))
        if target_mask is not None:
            emb = ad.mul(emb, np.asarray(target_mask, dtype=emb.data.dtype)[:, None])
        emb_i, emb_j = ad.gather_rows(emb, topo.dst), ad.gather_rows(emb, topo.src)
    elif mode == PRIOR:
        zeros = Tensor(np.zeros((topo.n_edges, params.d_target), dtype=state.V.data.dtype))
        emb_i = emb_j = zeros
    else:
        raise ValueError(f"unknown agent mode {mode!r}")
    summary = ad.concat([ad.gather_rows(state.V, topo.dst), ad.gather_rows(state.V, topo.src),
                         ad.gather_rows(state.u, topo.edge_graph), emb_i, emb_j])
    h = params.cell(summary, agent.h)
    h_u_edge = ad.gather_rows(agent.h_u, topo.edge_graph)
    if params.global_read == "mean":
        per_graph = np.bincount(topo.edge_graph, minlength=topo.n_graphs)[topo.edge_graph]
        h_u_edge = ad.mul(h_u_edge, (1.0 / per_graph).astype(h_u_edge.data.dtype)[:, None])
    scores = params.scorer(ad.concat([summary, h, h_u_edge]))
    K = params.K
    probs = ad.scale(ad.add(ad.softmax(scores), 1.0), 1.0 / (K + 2))
    h_u = ad.scatter_add_rows(h, topo.edge_graph, topo.n_graphs)
    return EdgeAgentState(h, h_u), probs


def gumbel(rng: np.random.Generator, shape, dtype=None) -> np.ndarray:
    """Standard Gumbel(0, 1) draws."""
    u = np.maximum(rng.random(shape), np.finfo(np.float64).tiny)  # in (0, 1)
    return (-np.log(-np.log(u))).astype(dtype or ad.default_dtype())


def sample_actions(probs: Tensor, temperature: float, rng: np.random.Generator | None = None,
                   hard: bool = True, noise: np.ndarray | None = None) -> Tensor:
    """Gumbel-softmax samples, one row per edge.

    With ``hard`` the forward value is the argmax one-hot and the gradient is
    that of the relaxed sample (straight-through).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if noise is None:
        noise = gumbel(rng, probs.shape, probs.data.dtype)
    y = ad.softmax(ad.scale(ad.add(ad.log(probs), noise), 1.0 / temperature))
    if not hard:
        return y
    onehot = np.zeros_like(y.data)
    onehot[np.arange(len(onehot)), y.data.argmax(axis=1)] = 1.0
    return ad.straight_through(y, onehot)


@dataclass
class Trajectory:
    prior: list[Tensor] = field(default_factory=list)
    proposal: list[Tensor | None] = field(default_factory=list)
    samples: list[Tensor] = field(default_factory=list)
    log_pi: list[np.ndarray] = field(default_factory=list)
    log_q: list[np.ndarray | None] = field(default_factory=list)
    from_prior: list[np.ndarray] = field(default_factory=list)  # per-edge flag per step

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class RolloutConfig:
    """``mode``: ``prior`` (test time), ``proposal`` or ``mixed``.

    In ``mixed`` mode graph g samples from the prior for steps ``1..t_switch[g]``
    and from the proposal afterwards.
    """

    mode: str = PRIOR
    temperature: float = 1.0
    hard: bool = True
    t_switch: np.ndarray | int | None = None


def _action_logprob(probs: Tensor, sample: Tensor) -> np.ndarray:
    return np.log((probs.data * sample.data).sum(axis=1))


def rollout(s0: GraphState, topo: GraphTopology, T: int, params: AgentParams, bank: MessageFunctionBank,
            updater: NodeUpdater, config: RolloutConfig | None = None, targets=None, target_mask=None,
            rng: np.random.Generator | None = None, assign=None) -> tuple[Trajectory, list[GraphState]]:
    """Alternate agent steps, action sampling and policy updates for ``T`` steps.

    ``assign`` optionally overrides sampled actions (a callable ``t -> |E| x (K+1)``),
    which tests use to force particular functions.
    """
    if T < 1:
        raise ValueError(f"rollout needs T >= 1, got {T}")
    config = config or RolloutConfig()
    need_q = config.mode in (PROPOSAL, "mixed")
    if config.mode not in (PRIOR, PROPOSAL, "mixed"):
        raise ValueError(f"unknown rollout mode {config.mode!r}")
    if config.mode == "mixed":
        switch = np.broadcast_to(np.asarray(config.t_switch if config.t_switch is not None else 0),
                                 (topo.n_graphs,))
        if np.any(switch < 0) or np.any(switch > T):
            raise ValueError(f"t_switch must lie in 0..{T}")
    else:
        switch = np.full(topo.n_graphs, T if config.mode == PRIOR else 0)

    dtype = s0.V.data.dtype
    pi_state = EdgeAgentState.zeros(topo, params.hidden, dtype)
    q_state = EdgeAgentState.zeros(topo, params.hidden, dtype) if need_q else None
    traj, states, state = Trajectory(), [s0], s0
    for t in range(1, T + 1):
        pi_state, pi = agent_step(state, topo, pi_state, params, PRIOR)
        q = None
        if need_q:
            q_state, q = agent_step(state, topo, q_state, params, PROPOSAL, targets, target_mask)
        use_prior = (t <= switch)[topo.edge_graph]
        if q is None or use_prior.all():
            dist = pi
        elif not use_prior.any():
            dist = q
        else:
            m = use_prior.astype(dtype)[:, None]
            dist = ad.add(ad.mul(pi, m), ad.mul(q, 1.0 - m))
        z = ad.constant(assign(t)) if assign is not None else \
            sample_actions(dist, config.temperature, rng, hard=config.hard)
        traj.prior.append(pi)
        traj.proposal.append(q)
        traj.samples.append(z)
        traj.log_pi.append(_action_logprob(pi, z))
        traj.log_q.append(_action_logprob(q, z) if q is not None else None)
        traj.from_prior.append(use_prior)
        state = policy_update(state, topo, bank, updater, z)
        states.append(state)
    return traj, states
