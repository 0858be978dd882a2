"""Message-function bank, the policy-selected node update and the two fixed-aggregation baselines."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import GraphState, GraphTopology, segment_mean
from .nn import MLP, Linear, Module


class MessageFunctionBank(Module):
    """``K`` learned pairwise functions of ``concat(v_i, v_j)`` plus the fixed ``f_0 = 0``.

    Index 0 is reserved for the zero function, so the bank has ``K + 1`` entries.
    """

    def __init__(self, rng: np.random.Generator, K: int, d_node: int, d_msg: int, hidden: int | None = None):
        if K < 1:
            raise ValueError(f"need at least one learned message function, got K={K}")
        self.K, self.d_node, self.d_msg = K, d_node, d_msg
        self.hidden = hidden or d_msg
        self.functions = [MLP(rng, [2 * d_node, self.hidden, d_msg]) for _ in range(K)]

    def __len__(self) -> int:
        return self.K + 1

    def apply(self, k: int, v_i: Tensor, v_j: Tensor) -> Tensor:
        """Message ``f_k(v_i, v_j)`` for a single pair of node vectors."""
        if not 0 <= k <= self.K:
            raise IndexError(f"message function index {k} outside 0..{self.K}")
        v_i, v_j = ad.constant(v_i), ad.constant(v_j)
        if k == 0:
            return Tensor(np.zeros(self.d_msg, dtype=v_i.data.dtype))
        x = ad.concat([ad.reshape(v_i, (1, -1)), ad.reshape(v_j, (1, -1))])
        return ad.reshape(self.functions[k - 1](x), (-1,))

    def all(self, pair: Tensor) -> list[Tensor]:
        """Outputs of ``f_1..f_K`` on every row of ``pair`` (E x 2Dv), first layers fused."""
        firsts = [f.layers[0] for f in self.functions]
        w1 = ad.concat([l.weight for l in firsts], axis=1)
        b1 = ad.concat([l.bias for l in firsts], axis=0)
        h = ad.elu(ad.add(ad.matmul(pair, w1), b1))
        H = self.hidden
        return [f.layers[1](ad.slice_cols(h, k * H, (k + 1) * H)) for k, f in enumerate(self.functions)]


def edge_pairs(V: Tensor, topo: GraphTopology) -> Tensor:
    """Rows ``concat(v_receiver, v_sender)`` for every edge."""
    return ad.concat([ad.gather_rows(V, topo.dst), ad.gather_rows(V, topo.src)])


class NodeUpdater(Module):
    """Residual node update ``v <- v + combiner(agg)`` and global ``u <- u + W mean(V)``.

    Every layer is bias-free, so a zero aggregate leaves nodes untouched.
    """

    def __init__(self, rng: np.random.Generator, d_msg: int, d_node: int):
        self.combiner = MLP(rng, [d_msg, d_node, d_node], bias=False)
        # small initial residual steps keep T-step sum aggregation from blowing up
        self.combiner.layers[-1].weight.data *= 0.1
        self.global_map = Linear(rng, d_node, d_node, bias=False)

    def __call__(self, state: GraphState, topo: GraphTopology, agg: Tensor) -> GraphState:
        V = ad.add(state.V, self.combiner(agg))
        u = ad.add(state.u, self.global_map(segment_mean(V, topo.node_graph, topo.graph_sizes)))
        return GraphState(V, u, state.step + 1)


def mix_messages(messages: list[Tensor], weights: Tensor, offset: int) -> Tensor:
    """``sum_k weights[:, k + offset] * messages[k]``."""
    total = None
    for k, m in enumerate(messages):
        term = ad.mul(ad.slice_cols(weights, k + offset, k + offset + 1), m)
        total = term if total is None else ad.add(total, term)
    return total


def policy_update(state: GraphState, topo: GraphTopology, bank: MessageFunctionBank,
                  updater: NodeUpdater, assignment: Tensor) -> GraphState:
    """One step of policy message passing.

    ``assignment`` holds one (possibly relaxed) one-hot row over ``K + 1``
    functions per edge; the message on an edge is the assignment-weighted
    mixture of the bank, summed into the receiving node.
    """
    assignment = ad.constant(assignment)
    if assignment.shape != (topo.n_edges, len(bank)):
        raise ValueError(f"assignment shape {assignment.shape} != ({topo.n_edges}, {len(bank)})")
    messages = bank.all(edge_pairs(state.V, topo))
    msg = mix_messages(messages, assignment, offset=1)
    agg = ad.scatter_add_rows(msg, topo.dst, topo.n_nodes)
    return updater(state, topo, agg)


def mean_pool_update(state: GraphState, topo: GraphTopology, bank: MessageFunctionBank,
                     updater: NodeUpdater) -> GraphState:
    """Baseline: a single shared function ``f_1``, mean over incoming messages."""
    msg = bank.functions[0](edge_pairs(state.V, topo))
    agg = segment_mean(msg, topo.dst, topo.in_degree)
    return updater(state, topo, agg)


class AttentionGate(Module):
    """Per-edge sigmoid gates over the ``K`` learned functions."""

    def __init__(self, rng: np.random.Generator, d_node: int, K: int):
        self.proj = Linear(rng, 2 * d_node, K)

    def __call__(self, pair: Tensor) -> Tensor:
        return ad.sigmoid(self.proj(pair))


def attention_update(state: GraphState, topo: GraphTopology, bank: MessageFunctionBank,
                     updater: NodeUpdater, gate) -> GraphState:
    """Baseline: ``sum_k gate_k * f_k`` on each edge, summed into the receiver."""
    pair = edge_pairs(state.V, topo)
    gates = gate(pair)
    if gates.shape != (topo.n_edges, bank.K):
        raise ValueError(f"gate output shape {gates.shape} != ({topo.n_edges}, {bank.K})")
    msg = mix_messages(bank.all(pair), gates, offset=0)
    agg = ad.scatter_add_rows(msg, topo.dst, topo.n_nodes)
    return updater(state, topo, agg)
