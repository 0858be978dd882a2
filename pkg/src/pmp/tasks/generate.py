"""Dataset builders keyed by task name; instance i is drawn from ``default_rng([seed, i])``."""
from __future__ import annotations

import numpy as np

from ..data import Example
from .nodeclass import gen_community
from .puzzle import TextureSpec, gen_puzzle
from .whereami import gen_where_am_i

DEFAULTS = {
    "whereami": {"grid_k": 6, "n_objects": 9, "n_glyphs": 4, "n_train": 2000, "n_val": 200, "n_test": 500},
    "puzzle": {"d": 3, "size": 48, "channels": 1, "smoothness": 4.0, "n_train": 2000, "n_val": 200, "n_test": 500},
    "community": {"n_nodes": 400, "n_communities": 4, "p_in": 0.05, "p_out": 0.004, "d_feat": 16,
                  "signal": 1.0, "noise_ratio": 0.0},
}


def _splits(p: dict):
    return ["train"] * p["n_train"] + ["val"] * p["n_val"] + ["test"] * p["n_test"]


def make_dataset(task: str, seed: int, **overrides) -> tuple[list[Example], dict]:
    """Examples plus the sidecar params (including ``n_classes``)."""
    if task not in DEFAULTS:
        raise ValueError(f"unknown task {task!r}; choose from {sorted(DEFAULTS)}")
    unknown = set(overrides) - set(DEFAULTS[task])
    if unknown:
        raise ValueError(f"unknown {task} parameter(s): {sorted(unknown)}")
    p = {**DEFAULTS[task], **overrides}
    if task == "whereami":
        examples = [gen_where_am_i(p["grid_k"], p["n_objects"], p["n_glyphs"], np.random.default_rng([seed, i]))
                    .to_example(split) for i, split in enumerate(_splits(p))]
        n_classes = p["grid_k"] ** 2
    elif task == "puzzle":
        spec = TextureSpec(p["size"], p["channels"], p["smoothness"])
        examples = [gen_puzzle(spec, p["d"], np.random.default_rng([seed, i])).to_example(split)
                    for i, split in enumerate(_splits(p))]
        n_classes = p["d"] ** 2
    else:
        rng = np.random.default_rng([seed])
        inst = gen_community(rng, p["n_nodes"], p["n_communities"], p["p_in"], p["p_out"], p["d_feat"],
                             p["signal"])
        if p["noise_ratio"]:
            inst = inst.with_noise(p["noise_ratio"], np.random.default_rng([seed, 1]))
        examples = [inst.to_example()]
        n_classes = p["n_communities"]
    return examples, {**p, "seed": seed, "n_classes": n_classes}
