"""Full models: policy message passing and the mean-pool / attention GNN baselines."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .agent import PRIOR, AgentParams, RolloutConfig, rollout
from .data import Example
from .graph import GraphState, init_state
from .messages import AttentionGate, MessageFunctionBank, NodeUpdater, attention_update, mean_pool_update
from .nn import MLP, Module
from .objective import Decoder, LossReport, elbo_loss, mixed_rollout_loss

KINDS = ("pmp", "gnn-mean", "gnn-attention")


@dataclass
class ModelConfig:
    kind: str = "pmp"
    d_node: int = 50
    d_msg: int = 50
    hidden: int = 32
    K: int = 4
    T: int = 5
    d_target: int = 16
    beta: float = 1.0
    temperature: float = 1.0
    samples: int = 5
    dense: bool = True
    global_read: str = "mean"

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"model kind must be one of {KINDS}, got {self.kind!r}")
        for key in ("d_node", "d_msg", "hidden", "K", "T", "d_target", "samples"):
            if getattr(self, key) < 1:
                raise ValueError(f"model.{key} must be positive")
        if self.global_read not in ("sum", "mean"):
            raise ValueError(f"model.global_read must be 'sum' or 'mean', got {self.global_read!r}")
        if self.temperature <= 0:
            raise ValueError("model.temperature must be positive")


class GraphModel(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, d_feat: int, n_classes: int):
        cfg.validate()
        self.cfg = cfg
        self.encoder = MLP(rng, [d_feat, cfg.d_node, cfg.d_node])
        K = 1 if cfg.kind == "gnn-mean" else cfg.K
        self.bank = MessageFunctionBank(rng, K, cfg.d_node, cfg.d_msg)
        self.updater = NodeUpdater(rng, cfg.d_msg, cfg.d_node)
        self.agent = AgentParams(rng, cfg.d_node, K, cfg.hidden, n_classes, cfg.d_target,
                                 global_read=cfg.global_read) \
            if cfg.kind == "pmp" else None
        self.gate = AttentionGate(rng, cfg.d_node, K) if cfg.kind == "gnn-attention" else None
        self.decoder = Decoder(rng, cfg.d_node, n_classes)
        self.name_parameters()

    @property
    def is_policy(self) -> bool:
        return self.cfg.kind == "pmp"

    def initial_state(self, ex: Example) -> GraphState:
        return init_state(ex.features.astype(ad.default_dtype()), ex.topo, self.encoder)

    def _fixed_rollout(self, s0: GraphState, ex: Example, T: int) -> list[GraphState]:
        states = [s0]
        for _ in range(T):
            if self.cfg.kind == "gnn-mean":
                states.append(mean_pool_update(states[-1], ex.topo, self.bank, self.updater))
            else:
                states.append(attention_update(states[-1], ex.topo, self.bank, self.updater, self.gate))
        return states

    def loss(self, ex: Example, rng: np.random.Generator, t_switch=0, T: int | None = None,
             hard: bool = True) -> LossReport:
        """Negative ELBO (policy model) or dense NLL (baselines) for a packed batch."""
        T = T or self.cfg.T
        s0 = self.initial_state(ex)
        if not self.is_policy:
            states = self._fixed_rollout(s0, ex, T)
            return elbo_loss(None, states, ex.targets, ex.mask, self.decoder, self.cfg.beta,
                             ex.topo, self.cfg.dense)
        return mixed_rollout_loss(s0, ex.topo, T, t_switch, self.agent, self.bank, self.updater,
                                  self.decoder, ex.targets, ex.mask, self.cfg.beta, rng,
                                  self.cfg.temperature, self.cfg.dense, hard=hard)

    def predict_proba(self, ex: Example, rng: np.random.Generator, samples: int | None = None,
                      T: int | None = None) -> np.ndarray:
        """Class probabilities of the final state averaged over prior rollouts."""
        T = T or self.cfg.T
        s0 = self.initial_state(ex)
        if not self.is_policy:
            return _softmax(self.decoder(self._fixed_rollout(s0, ex, T)[-1].V).data)
        M = samples or self.cfg.samples
        total = 0.0
        cfg = RolloutConfig(mode=PRIOR, temperature=self.cfg.temperature, hard=True)
        for _ in range(M):
            _, states = rollout(s0, ex.topo, T, self.agent, self.bank, self.updater, cfg, rng=rng)
            total = total + _softmax(self.decoder(states[-1].V).data.astype(np.float64))
        return total / M


def _softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=1, keepdims=True)
