"""Transductive node classification: a synthetic stochastic-block graph and the Cora loader."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data import SPLITS, Example
from ..graph import GraphTopology, add_noise_edges, undirected

log = logging.getLogger(__name__)


@dataclass(eq=False)
class NodeClassInstance:
    features: np.ndarray
    topo: GraphTopology
    targets: np.ndarray
    node_split: np.ndarray  # 0 train, 1 val, 2 test, -1 unused
    clean_edges: int | None = None
    skipped_citations: int = 0

    @property
    def n_classes(self) -> int:
        return int(self.targets.max()) + 1

    def mask(self, split: str) -> np.ndarray:
        return self.node_split == SPLITS.index(split)

    def with_noise(self, ratio: float, rng: np.random.Generator) -> "NodeClassInstance":
        noisy = add_noise_edges(self.topo, ratio, rng)
        return NodeClassInstance(self.features, noisy, self.targets, self.node_split, self.topo.n_edges)

    def to_example(self) -> Example:
        return Example(self.features.astype(np.float32), self.topo, self.targets,
                       self.node_split >= 0, "train", self.node_split,
                       info={"n_classes": self.n_classes})


def split_per_class(targets: np.ndarray, n_train_per_class: int, n_val: int, n_test: int,
                    order: np.ndarray | None = None) -> np.ndarray:
    """First ``n_train_per_class`` nodes of each class (in ``order``) train, the next
    ``n_val`` other nodes validate, the next ``n_test`` test."""
    order = np.arange(len(targets)) if order is None else order
    split = np.full(len(targets), -1, dtype=np.int64)
    seen = np.zeros(int(targets.max()) + 1, dtype=np.int64)
    for i in order:
        if seen[targets[i]] < n_train_per_class:
            split[i] = 0
            seen[targets[i]] += 1
    rest = [i for i in order if split[i] < 0]
    if len(rest) < n_val + n_test:
        raise ValueError(f"only {len(rest)} nodes left for {n_val} val + {n_test} test")
    split[rest[:n_val]] = 1
    split[rest[n_val:n_val + n_test]] = 2
    return split


def gen_community(rng: np.random.Generator, n_nodes: int = 400, n_communities: int = 4,
                  p_in: float = 0.05, p_out: float = 0.004, d_feat: int = 16,
                  signal: float = 1.0, n_train_per_class: int = 20, n_val: int = 80,
                  n_test: int = 200) -> NodeClassInstance:
    """Stochastic block graph whose node features only weakly reveal the community.

    Features are a scaled community code in the first ``n_communities`` slots
    plus unit Gaussian noise everywhere.
    """
    labels = np.repeat(np.arange(n_communities), int(np.ceil(n_nodes / n_communities)))[:n_nodes]
    labels = labels[rng.permutation(n_nodes)]
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    upper = np.triu(rng.random((n_nodes, n_nodes)) < prob, k=1)
    pairs = np.argwhere(upper)
    feats = rng.standard_normal((n_nodes, d_feat))
    feats[np.arange(n_nodes), labels] += signal
    split = split_per_class(labels, n_train_per_class, n_val, n_test, rng.permutation(n_nodes))
    return NodeClassInstance(feats.astype(np.float32), undirected(n_nodes, pairs), labels.astype(np.int64), split)


def load_cora(content_path: str | Path, cites_path: str | Path, n_train_per_class: int = 20,
              n_val: int = 500, n_test: int = 1000) -> NodeClassInstance:
    """Read the standard Cora ``.content`` / ``.cites`` files.

    Nodes keep file order; class ids follow sorted label names.  Citations to
    unknown publication ids are skipped and counted in the log.  The split takes the
    first ``n_train_per_class`` nodes of each class for training, then the
    validation and test nodes, in file order.
    """
    ids, rows, labels = {}, [], []
    with open(content_path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise ValueError(f"{content_path}:{lineno}: expected id, features and label")
            try:
                feat = [float(x) for x in parts[1:-1]]
            except ValueError:
                raise ValueError(f"{content_path}:{lineno}: non-numeric feature") from None
            if rows and len(feat) != len(rows[0]):
                raise ValueError(f"{content_path}:{lineno}: {len(feat)} features, expected {len(rows[0])}")
            if parts[0] in ids:
                raise ValueError(f"{content_path}:{lineno}: duplicate node id {parts[0]}")
            ids[parts[0]] = len(rows)
            rows.append(feat)
            labels.append(parts[-1])
    classes = sorted(set(labels))
    targets = np.array([classes.index(l) for l in labels], dtype=np.int64)

    pairs, skipped = [], 0
    with open(cites_path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ValueError(f"{cites_path}:{lineno}: expected two publication ids")
            if parts[0] not in ids or parts[1] not in ids:
                skipped += 1
                continue
            pairs.append((ids[parts[0]], ids[parts[1]]))
    if skipped:
        log.warning("skipped %d citations with unknown publication ids", skipped)
    n = len(rows)
    topo = undirected(n, np.array(pairs, dtype=np.int64).reshape(-1, 2))
    split = split_per_class(targets, n_train_per_class, n_val, n_test)
    return NodeClassInstance(np.array(rows, dtype=np.float32), topo, targets, split,
                             skipped_citations=skipped)
