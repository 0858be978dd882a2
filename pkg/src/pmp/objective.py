"""Time-factored ELBO, trajectory KL and mixed prior/proposal rollouts with importance weights."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .agent import AgentParams, RolloutConfig, Trajectory, rollout
from .autodiff import Tensor
from .graph import GraphState, GraphTopology
from .messages import MessageFunctionBank, NodeUpdater
from .nn import MLP, Module

WEIGHT_CLIP = (0.1, 10.0)


class Decoder(Module):
    """Node state -> class logits."""

    def __init__(self, rng: np.random.Generator, d_node: int, n_classes: int, hidden: int | None = None):
        self.mlp = MLP(rng, [d_node, hidden or d_node, n_classes])
        self.n_classes = n_classes

    def __call__(self, V: Tensor) -> Tensor:
        return self.mlp(V)


@dataclass
class LossReport:
    """``total = sum(nll) + beta * sum(kl)``, i.e. the negative ELBO (per instance).

    ``nll`` and ``kl`` are reported without importance weights; ``loss`` carries them.
    """

    loss: Tensor
    nll: list[float]
    kl: list[float]
    beta: float = 1.0
    weight: np.ndarray = field(default_factory=lambda: np.ones(1))
    states: list[GraphState] = field(default_factory=list, repr=False)
    trajectory: Trajectory | None = field(default=None, repr=False)

    @property
    def total(self) -> float:
        return float(np.sum(self.nll) + self.beta * np.sum(self.kl))

    @property
    def kl_total(self) -> float:
        return float(np.sum(self.kl))


def node_weights(topo: GraphTopology, mask, graph_weights=None) -> np.ndarray:
    """Per-node weights that turn a weighted sum into the batch mean of per-graph masked means."""
    mask = np.asarray(mask, dtype=bool)
    counts = np.bincount(topo.node_graph[mask], minlength=topo.n_graphs)
    if np.any(counts[np.unique(topo.node_graph)] == 0) or not mask.any():
        raise ValueError("every graph needs at least one supervised node")
    gw = np.ones(topo.n_graphs) if graph_weights is None else np.asarray(graph_weights, dtype=np.float64)
    w = np.where(mask, gw[topo.node_graph] / counts[topo.node_graph].clip(min=1), 0.0)
    return w / topo.n_graphs


def step_log_likelihood(state: GraphState, targets, mask, decoder: Decoder,
                        topo: GraphTopology | None = None, graph_weights=None) -> Tensor:
    """Mean over masked nodes of ``log softmax(decoder(v_i))[target_i]``.

    For packed batches this is the mean over graphs of each graph's masked
    mean, each graph scaled by its entry in ``graph_weights``.
    """
    return _step_ll(state, targets, mask, decoder, topo, graph_weights)[0]


def _step_ll(state, targets, mask, decoder, topo, graph_weights) -> tuple[Tensor, float]:
    # second value: the same mean without graph weights, for reporting
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty supervision mask")
    if topo is None:
        topo = GraphTopology(state.V.shape[0], np.zeros((0, 2), dtype=np.int64))
    rows = np.flatnonzero(mask)
    logp = ad.log_softmax(decoder(ad.gather_rows(state.V, rows)))
    picked = ad.take(logp, (np.arange(rows.size), np.asarray(targets, dtype=np.int64)[rows]))
    w = node_weights(topo, mask, graph_weights)[rows]
    plain = node_weights(topo, mask)[rows]
    return ad.sum(ad.mul(picked, w.astype(picked.data.dtype))), float(picked.data @ plain)


def categorical_kl(q: Tensor, p: Tensor) -> Tensor:
    """Row-wise ``sum_k q_k (log q_k - log p_k)``."""
    return ad.sum(ad.mul(q, ad.sub(ad.log(q), ad.log(p))), axis=1)


def _plain_kl(q: Tensor, p: Tensor) -> float:
    return float(np.sum(q.data * (np.log(q.data) - np.log(p.data))))


def trajectory_kl(traj: Trajectory, edge_weights=None) -> tuple[Tensor, list[float]]:
    """Analytic KL between the recorded proposal and prior distributions.

    Summed over steps and edges (edge-weighted when ``edge_weights`` is given).
    Returns the differentiable total and its per-step values.
    """
    if not traj.prior or any(q is None for q in traj.proposal) or len(traj.prior) != len(traj.proposal):
        raise ValueError("trajectory lacks proposal or prior records")
    total, per_step = None, []
    for q, pi in zip(traj.proposal, traj.prior):
        kl = categorical_kl(q, pi)
        if edge_weights is not None:
            kl = ad.mul(kl, np.asarray(edge_weights, dtype=kl.data.dtype))
        kl = ad.sum(kl)
        per_step.append(kl.item())
        total = kl if total is None else ad.add(total, kl)
    return total, per_step


def elbo_loss(traj: Trajectory, states: list[GraphState], targets, mask, decoder: Decoder,
              beta: float = 1.0, topo: GraphTopology | None = None, dense: bool = True,
              graph_weights=None) -> LossReport:
    """Negative time-factored ELBO: ``-sum_t loglik(s_t) + beta * KL(q || pi)``.

    With ``dense=False`` only the final state is supervised.  ``traj`` may be
    None (or lack proposals) for the fixed-aggregation baselines, in which case
    the KL term is absent.
    """
    T = len(states) - 1
    if traj is not None and len(traj) != T:
        raise ValueError(f"{len(states)} states for a trajectory of length {len(traj)}")
    steps = range(1, T + 1) if dense else [T]
    loss, nll = None, []
    for t in steps:
        ll, plain = _step_ll(states[t], targets, mask, decoder, topo, graph_weights)
        nll.append(-plain)
        loss = ad.neg(ll) if loss is None else ad.sub(loss, ll)
    kl = []
    if traj is not None and traj.proposal and traj.proposal[0] is not None:
        edge_w = None
        if topo is not None:
            gw = np.ones(topo.n_graphs) if graph_weights is None else np.asarray(graph_weights, dtype=np.float64)
            edge_w = gw[topo.edge_graph] / topo.n_graphs
        kl_total, kl = trajectory_kl(traj, edge_w)
        if graph_weights is not None:
            kl = [_plain_kl(q, pi) / topo.n_graphs for q, pi in zip(traj.proposal, traj.prior)]
        if beta:
            loss = ad.add(loss, ad.scale(kl_total, beta))
    gw = np.ones(1) if graph_weights is None else np.asarray(graph_weights)
    return LossReport(loss, nll, kl, beta, gw, states, traj)


def importance_weights(traj: Trajectory, topo: GraphTopology, clip=WEIGHT_CLIP) -> np.ndarray:
    """Per-graph ``exp(sum over prior-sampled steps of log q(z) - log pi(z))``, clipped, no gradient."""
    log_w = np.zeros(topo.n_graphs)
    for lq, lp, from_prior in zip(traj.log_q, traj.log_pi, traj.from_prior):
        if lq is None:
            continue
        diff = np.where(from_prior, lq.astype(np.float64) - lp.astype(np.float64), 0.0)
        log_w += np.bincount(topo.edge_graph, weights=diff, minlength=topo.n_graphs)
    return np.clip(np.exp(np.clip(log_w, -50, 50)), *clip)


def mixed_rollout_loss(s0: GraphState, topo: GraphTopology, T: int, t_switch, params: AgentParams,
                       bank: MessageFunctionBank, updater: NodeUpdater, decoder: Decoder, targets, mask,
                       beta: float = 1.0, rng: np.random.Generator | None = None, temperature: float = 1.0,
                       dense: bool = True, target_mask=None, hard: bool = True) -> LossReport:
    """Roll out with the prior for ``t_switch`` steps, finish with the proposal,
    and importance-weight each graph's negative ELBO by the prior-prefix ratio."""
    t_switch = np.broadcast_to(np.asarray(t_switch), (topo.n_graphs,))
    if np.any(t_switch < 0) or np.any(t_switch > T):
        raise ValueError(f"t_switch must lie in 0..{T}, got {t_switch}")
    cfg = RolloutConfig(mode="mixed", temperature=temperature, hard=hard, t_switch=t_switch)
    traj, states = rollout(s0, topo, T, params, bank, updater, cfg, targets,
                           mask if target_mask is None else target_mask, rng)
    w = importance_weights(traj, topo)
    return elbo_loss(traj, states, targets, mask, decoder, beta, topo, dense, graph_weights=w)
