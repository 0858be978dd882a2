"""Training, evaluation, gradient verification and sweep orchestration."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .config import RunConfig
from .data import Example, collate, load_dataset
from .graph import fully_connected
from .model import GraphModel
from .optim import Adam
from .tasks.metrics import assign_positions, kendall_tau, per_node_accuracy

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "split", "nll", "kl", "accuracy", "kendall_tau", "wall_ms"]


class TrainingAborted(RuntimeError):
    pass


def worker_count() -> int:
    return max(1, int(os.environ.get("PMP_THREADS", "1")))


def dataset_shapes(examples: list[Example], meta: dict) -> tuple[int, int]:
    d_feat = examples[0].features.shape[1]
    n_classes = meta.get("n_classes") or int(max(e.targets.max() for e in examples)) + 1
    return d_feat, int(n_classes)


def build_model(cfg: RunConfig, d_feat: int, n_classes: int) -> GraphModel:
    rng = np.random.default_rng([cfg.schedule.seed, 0])
    return GraphModel(rng, cfg.model_config(), d_feat, n_classes)


def is_transductive(examples: list[Example]) -> bool:
    return len(examples) == 1 and examples[0].node_split is not None


def split_examples(examples: list[Example], split: str) -> list[Example]:
    if is_transductive(examples):
        return [examples[0].masked(split)]
    return [e for e in examples if e.split == split]


def _chunks(items: list, size: int):
    for start in range(0, len(items), size):
        yield items[start:start + size]


def evaluate_model(model: GraphModel, examples: list[Example], seed, samples: int | None = None,
                   batch_size: int = 16, T: int | None = None) -> dict:
    """Per-node accuracy, NLL of the sample-averaged prediction and, for puzzles, mean Kendall tau.

    Batches are evaluated on a worker pool capped by ``PMP_THREADS``; each
    batch has its own seeded generator, so results do not depend on the pool size.
    """
    batches = list(_chunks(examples, batch_size))

    def run(i):
        rng = np.random.default_rng(list(np.atleast_1d(seed)) + [i])
        packed = collate(batches[i])
        return packed, model.predict_proba(packed, rng, samples, T)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(run, range(len(batches))))

    correct = total = 0
    nll = 0.0
    taus = []
    for (packed, probs), members in zip(results, batches):
        mask = packed.mask
        if not mask.any():
            continue
        pred = probs.argmax(axis=1)
        correct += int((pred[mask] == packed.targets[mask]).sum())
        total += int(mask.sum())
        nll -= float(np.log(np.clip(probs[mask, packed.targets[mask]], 1e-12, None)).sum())
        if "d" in members[0].info:
            offset = 0
            for ex in members:
                sl = slice(offset, offset + ex.n_nodes)
                taus.append(kendall_tau(assign_positions(probs[sl]), ex.targets))
                offset += ex.n_nodes
    return {
        "accuracy": correct / max(total, 1),
        "nll": nll / max(total, 1),
        "kendall_tau": float(np.mean(taus)) if taus else None,
        "n_nodes": total,
    }


def _model_tensors(model: GraphModel, opt: Adam | None) -> dict[str, np.ndarray]:
    out = {p.name: p.data for p in model.parameters()}
    if opt is not None:
        out.update({f"adam.m.{p.name}": m for p, m in zip(opt.params, opt.m)})
        out.update({f"adam.v.{p.name}": v for p, v in zip(opt.params, opt.v)})
    return out


def make_checkpoint(cfg: RunConfig, model: GraphModel, opt: Adam | None, epoch: int,
                    rng: np.random.Generator, extra: dict | None = None) -> Checkpoint:
    return Checkpoint(cfg.to_json(), cfg.digest(), opt.t if opt else 0, epoch,
                      rng.bit_generator.state, _model_tensors(model, opt), extra or {})


def restore(model: GraphModel, ckpt: Checkpoint, opt: Adam | None = None) -> None:
    for p in model.parameters():
        arr = ckpt.tensors[p.name]
        if arr.shape != p.shape:
            raise ValueError(f"checkpoint tensor {p.name} has shape {arr.shape}, model expects {p.shape}")
        p.data = arr.astype(p.data.dtype).copy()
    if opt is not None:
        opt.m = [ckpt.tensors[f"adam.m.{p.name}"].copy() for p in opt.params]
        opt.v = [ckpt.tensors[f"adam.v.{p.name}"].copy() for p in opt.params]
        opt.t = ckpt.step


def model_from_checkpoint(ckpt: Checkpoint, d_feat: int, n_classes: int) -> tuple[RunConfig, GraphModel]:
    cfg = RunConfig.from_dict(json.loads(ckpt.config_json))
    model = build_model(cfg, d_feat, n_classes)
    restore(model, ckpt)
    return cfg, model


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


class MetricsWriter:
    """Sole appender of the metrics CSV."""

    def __init__(self, path: Path, keep_until: int | None = None):
        self.path = path
        rows = []
        if keep_until is not None and path.exists():
            with open(path, newline="") as fh:
                rows = [r for r in csv.reader(fh)][1:]
            rows = [r for r in rows if int(r[0]) <= keep_until]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            w.writerows(rows)

    def write(self, epoch: int, split: str, nll, kl, accuracy, tau, wall_ms) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [epoch, split, _fmt(nll), _fmt(kl), _fmt(accuracy), _fmt(tau),
                 "" if wall_ms is None else str(int(wall_ms))])


@dataclass
class TrainResult:
    out_dir: Path
    best_epoch: int
    best_val_accuracy: float
    history: list[dict]
    model: GraphModel

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / "metrics.csv"

    @property
    def best_checkpoint(self) -> Path:
        return self.out_dir / "best.ckpt"


def _t_switch(cfg: RunConfig, n_graphs: int, rng: np.random.Generator) -> np.ndarray:
    if not cfg.mixed.enabled:
        return np.zeros(n_graphs, dtype=np.int64)
    if cfg.mixed.policy == "fixed":
        return np.full(n_graphs, cfg.mixed.t_switch, dtype=np.int64)
    return rng.integers(0, cfg.model.T // 2 + 1, size=n_graphs)


def _dump_abort(out_dir: Path, epoch: int, report, exc: Exception) -> None:
    dump = {"epoch": epoch, "error": repr(exc)}
    if report is not None:
        dump.update(nll=report.nll, kl=report.kl, weight=np.asarray(report.weight).tolist())
    (out_dir / "abort_dump.json").write_text(json.dumps(dump, indent=2) + "\n")


def train(cfg: RunConfig, data, out_dir: str | Path, resume: bool = False,
          examples: list[Example] | None = None, meta: dict | None = None) -> TrainResult:
    """Train with Adam on ``data`` (a PMPD path), writing metrics and checkpoints to ``out_dir``.

    Instances are packed ``batch_size`` at a time into one disjoint-union graph,
    whose loss is the mean of the per-instance losses.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if examples is None:
        examples, meta = load_dataset(data)
    meta = meta or {}
    d_feat, n_classes = dataset_shapes(examples, meta)
    train_set, val_set = split_examples(examples, "train"), split_examples(examples, "val")
    if not train_set:
        raise ValueError("dataset has no training instances")

    model = build_model(cfg, d_feat, n_classes)
    params = model.parameters()
    o = cfg.optim
    opt = Adam(params, o.lr, o.beta1, o.beta2, o.eps, o.clip_norm)
    rng = np.random.default_rng([cfg.schedule.seed, 1])
    start, best_acc, best_epoch, stale = 0, -1.0, 0, 0
    last_path, best_path = out_dir / "last.ckpt", out_dir / "best.ckpt"
    if resume and last_path.exists():
        ckpt = Checkpoint.load(last_path)
        ckpt.check_config(cfg.digest())
        restore(model, ckpt, opt)
        rng.bit_generator.state = ckpt.rng_state
        start = ckpt.epoch
        best_acc, best_epoch, stale = ckpt.extra["best_acc"], ckpt.extra["best_epoch"], ckpt.extra["stale"]
    writer = MetricsWriter(out_dir / "metrics.csv", keep_until=start if resume else None)
    cfg.save(out_dir / "config.json")

    history = []
    bs = cfg.schedule.batch_size
    for epoch in range(start + 1, cfg.schedule.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        sums = {"nll": 0.0, "kl": 0.0, "correct": 0, "count": 0, "graphs": 0}
        report = None
        for idx in _chunks(list(order), bs):
            packed = collate([train_set[i] for i in idx])
            t_switch = _t_switch(cfg, packed.topo.n_graphs, rng)
            try:
                with ad.Record() as rec:
                    report = model.loss(packed, rng, t_switch)
                if not np.isfinite(report.total):
                    raise ad.NonFiniteError(f"loss became {report.total}")
                grads = ad.backward(rec, report.loss, params)
                opt.step(grads)
            except (ad.NonFiniteError, FloatingPointError, ad.DomainError) as exc:
                _dump_abort(out_dir, epoch, report, exc)
                raise TrainingAborted(f"non-finite values at epoch {epoch}: {exc}") from exc
            g = packed.topo.n_graphs
            sums["nll"] += float(np.sum(report.nll)) * g
            sums["kl"] += float(np.sum(report.kl)) * g
            sums["graphs"] += g
            logits = model.decoder(report.states[-1].V).data
            mask = packed.mask
            sums["correct"] += int((logits.argmax(axis=1)[mask] == packed.targets[mask]).sum())
            sums["count"] += int(mask.sum())
        train_row = {
            "nll": sums["nll"] / sums["graphs"],
            "kl": sums["kl"] / sums["graphs"],
            "accuracy": sums["correct"] / max(sums["count"], 1),
        }
        wall = (time.perf_counter() - t0) * 1000 if cfg.schedule.log_wall_time else None
        writer.write(epoch, "train", train_row["nll"], train_row["kl"], train_row["accuracy"], None, wall)
        val = evaluate_model(model, val_set, [cfg.schedule.seed, 2, epoch], batch_size=bs) if val_set else None
        if val is not None:
            writer.write(epoch, "val", val["nll"], None, val["accuracy"], val["kendall_tau"], None)
        history.append({"epoch": epoch, "train": train_row, "val": val})
        log.info("epoch %d train nll %.4f acc %.3f val acc %s", epoch, train_row["nll"],
                 train_row["accuracy"], None if val is None else f"{val['accuracy']:.3f}")

        score = val["accuracy"] if val is not None else train_row["accuracy"]
        if score > best_acc:
            best_acc, best_epoch, stale = score, epoch, 0
            make_checkpoint(cfg, model, None, epoch, rng, {"val_accuracy": score}).save(best_path)
        else:
            stale += 1
        extra = {"best_acc": best_acc, "best_epoch": best_epoch, "stale": stale}
        make_checkpoint(cfg, model, opt, epoch, rng, extra).save(last_path)
        if stale >= cfg.schedule.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    return TrainResult(out_dir, best_epoch, best_acc, history, model)


def evaluate(ckpt_path, data, samples: int | None = None, split: str = "test",
             examples: list[Example] | None = None, meta: dict | None = None) -> dict:
    if examples is None:
        examples, meta = load_dataset(data)
    ckpt = Checkpoint.load(ckpt_path)
    d_feat, n_classes = dataset_shapes(examples, meta or {})
    cfg, model = model_from_checkpoint(ckpt, d_feat, n_classes)
    chosen = split_examples(examples, split)
    if not chosen:
        raise ValueError(f"dataset has no {split} instances")
    report = evaluate_model(model, chosen, [cfg.schedule.seed, 3], samples, cfg.schedule.batch_size)
    report.update(split=split, samples=samples or cfg.model.samples, epoch=ckpt.epoch)
    return report


# ---------------------------------------------------------------------------
# gradient verification


def grad_check_instance(d_feat: int = 5, n_classes: int = 3, n_nodes: int = 3, seed: int = 0) -> Example:
    rng = np.random.default_rng(seed)
    return Example(rng.standard_normal((n_nodes, d_feat)), fully_connected(n_nodes),
                   rng.integers(0, n_classes, n_nodes), np.ones(n_nodes, dtype=bool))


def run_grad_check(cfg: RunConfig, kinds=("pmp", "gnn-mean", "gnn-attention"), T: int = 2,
                   eps: float = 1e-5, max_entries: int = 6, grad_transform=None) -> dict[str, ad.GradCheckReport]:
    """Finite-difference check of the full loss on a 3-node instance at 64-bit.

    Gumbel noise is frozen by reseeding on every evaluation and samples are
    taken relaxed (straight-through gradients are deliberately not those of the
    hard forward value).  ``t_switch = 0`` keeps the detached importance
    weight at exactly 1.
    """
    reports = {}
    with ad.precision(64):
        ex = grad_check_instance()
        for kind in kinds:
            run_cfg = replace(cfg, baseline=kind, model=replace(cfg.model, T=T))
            model = build_model(run_cfg, ex.features.shape[1], 3)

            def fn(model=model):
                return model.loss(ex, np.random.default_rng(1234), t_switch=0, hard=False).loss

            reports[kind] = ad.grad_check(fn, model.parameters(), eps=eps, max_entries=max_entries,
                                          grad_transform=grad_transform)
    return reports


# ---------------------------------------------------------------------------
# sweeps


def noise_sweep(cfg: RunConfig, ratios, seeds, out_dir: str | Path, kinds=("pmp", "gnn-mean"),
                **community) -> list[dict]:
    """Train each model on the clean and noise-augmented community graph for every seed.

    Returns one row per (seed, ratio, model) with the test accuracy of the
    best-validation checkpoint; rows are also written to ``noise_sweep.csv``.
    """
    from .tasks.generate import make_dataset

    out_dir = Path(out_dir)
    rows = []
    for seed in seeds:
        for ratio in [0.0] + [r for r in ratios if r != 0.0]:
            examples, meta = make_dataset("community", seed, noise_ratio=ratio, **community)
            for kind in kinds:
                run_cfg = replace(cfg, baseline=kind, schedule=replace(cfg.schedule, seed=seed))
                run_dir = out_dir / f"seed{seed}" / f"ratio{ratio:g}" / kind
                train(run_cfg, None, run_dir, examples=examples, meta=meta)
                res = evaluate(run_dir / "best.ckpt", None, examples=examples, meta=meta)
                rows.append({"seed": seed, "ratio": ratio, "model": kind, "test_accuracy": res["accuracy"],
                             "edges": examples[0].topo.n_edges})
    _write_rows(out_dir / "noise_sweep.csv", rows)
    return rows


def noise_drops(rows: list[dict], ratio: float = 1.0) -> dict[tuple[int, str], float]:
    """Clean-minus-noisy test accuracy per (seed, model)."""
    acc = {(r["seed"], r["ratio"], r["model"]): r["test_accuracy"] for r in rows}
    return {(s, m): acc[s, 0.0, m] - acc[s, ratio, m] for (s, rt, m) in acc if rt == ratio}


def ablation(cfg: RunConfig, data, out_dir: str | Path, Ks=(), Ts=(), examples=None, meta=None) -> list[dict]:
    """Test accuracy of the policy model across function-set sizes and inference-step counts."""
    if examples is None:
        examples, meta = load_dataset(data)
    out_dir = Path(out_dir)
    settings = [("K", k) for k in Ks] + [("T", t) for t in Ts]
    rows = []
    for axis, value in settings:
        run_cfg = replace(cfg, model=replace(cfg.model, **{axis: value}))
        if axis == "T" and cfg.mixed.t_switch > value:
            run_cfg = replace(run_cfg, mixed=replace(cfg.mixed, t_switch=value))
        run_dir = out_dir / f"{axis}{value}"
        train(run_cfg, None, run_dir, examples=examples, meta=meta)
        res = evaluate(run_dir / "best.ckpt", None, examples=examples, meta=meta)
        rows.append({"axis": axis, "value": value, "test_accuracy": res["accuracy"],
                     "kendall_tau": res["kendall_tau"]})
    _write_rows(out_dir / "ablation.csv", rows)
    return rows


def _write_rows(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
