import json

import numpy as np
import pytest

from pmp import autodiff as ad
from pmp import cli, harness
from pmp.checkpoint import Checkpoint, ConfigMismatch
from pmp.config import RunConfig
from pmp.data import collate
from pmp.optim import Adam
from pmp.tasks.generate import make_dataset

SMALL_MODEL = {"d_node": 8, "d_msg": 8, "hidden": 6, "K": 3, "T": 2, "d_target": 4, "samples": 2}


def small_cfg(kind="pmp", epochs=2, **schedule):
    return RunConfig.from_dict({"baseline": kind, "model": SMALL_MODEL,
                                "schedule": {"epochs": epochs, "batch_size": 4, **schedule}})


@pytest.fixture(scope="module")
def tiny():
    return make_dataset("whereami", 0, grid_k=4, n_objects=4, n_glyphs=3, n_train=8, n_val=4, n_test=4)


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ValueError, match="colour"):
        RunConfig.from_dict({"model": {"colour": 1}})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"extra": 1})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"baseline": "gcn"})
    cfg = small_cfg()
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg
    assert RunConfig.load(tmp_path / "c.json").digest() == cfg.digest()


def test_checkpoint_round_trip_is_byte_identical(tmp_path, tiny):
    res = harness.train(small_cfg(epochs=1), None, tmp_path, examples=tiny[0], meta=tiny[1])
    blob = (tmp_path / "last.ckpt").read_bytes()
    ckpt = Checkpoint.load(tmp_path / "last.ckpt")
    assert ckpt.to_bytes() == blob
    ckpt.save(tmp_path / "copy.ckpt")
    assert (tmp_path / "copy.ckpt").read_bytes() == blob
    cfg, model = harness.model_from_checkpoint(ckpt, tiny[0][0].features.shape[1], 16)
    for (name, p), q in zip(model.named_parameters(), res.model.parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=name)


def test_checkpoint_config_mismatch(tmp_path, tiny):
    harness.train(small_cfg(epochs=1), None, tmp_path, examples=tiny[0], meta=tiny[1])
    with pytest.raises(ConfigMismatch):
        harness.train(small_cfg(epochs=2, seed=5), None, tmp_path, resume=True, examples=tiny[0], meta=tiny[1])


def test_corrupt_checkpoint_is_rejected(tmp_path, tiny):
    harness.train(small_cfg(epochs=1), None, tmp_path, examples=tiny[0], meta=tiny[1])
    blob = (tmp_path / "last.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(blob[:len(blob) // 2])
    with pytest.raises(ValueError):
        Checkpoint.load(tmp_path / "bad.ckpt")


def test_training_is_deterministic(tmp_path, tiny):
    for name in ("a", "b"):
        harness.train(small_cfg(), None, tmp_path / name, examples=tiny[0], meta=tiny[1])
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    lines = a.decode().splitlines()
    assert lines[0] == "epoch,split,nll,kl,accuracy,kendall_tau,wall_ms"
    assert [l.split(",")[:2] for l in lines[1:]] == [["1", "train"], ["1", "val"], ["2", "train"], ["2", "val"]]


def test_resume_after_interrupt(tmp_path, tiny, monkeypatch):
    cfg = small_cfg(epochs=3)
    harness.train(cfg, None, tmp_path / "full", examples=tiny[0], meta=tiny[1])

    real = harness.make_checkpoint

    def crash_after_epoch_one(*args, **kw):
        ckpt = real(*args, **kw)
        if args[3] == 2:
            raise KeyboardInterrupt
        return ckpt

    monkeypatch.setattr(harness, "make_checkpoint", crash_after_epoch_one)
    with pytest.raises(KeyboardInterrupt):
        harness.train(cfg, None, tmp_path / "cut", examples=tiny[0], meta=tiny[1])
    monkeypatch.setattr(harness, "make_checkpoint", real)
    assert Checkpoint.load(tmp_path / "cut" / "last.ckpt").epoch == 1
    harness.train(cfg, None, tmp_path / "cut", resume=True, examples=tiny[0], meta=tiny[1])
    assert (tmp_path / "cut" / "metrics.csv").read_bytes() == (tmp_path / "full" / "metrics.csv").read_bytes()
    assert (tmp_path / "cut" / "last.ckpt").read_bytes() == (tmp_path / "full" / "last.ckpt").read_bytes()


def test_baseline_has_no_kl(tmp_path, tiny):
    res = harness.train(small_cfg("gnn-mean", epochs=1), None, tmp_path, examples=tiny[0], meta=tiny[1])
    assert res.history[0]["train"]["kl"] == 0.0
    pmp = harness.train(small_cfg("pmp", epochs=1), None, tmp_path / "p", examples=tiny[0], meta=tiny[1])
    assert pmp.history[0]["train"]["kl"] > 0.0


def test_non_finite_loss_aborts_with_dump(tmp_path, tiny, monkeypatch):
    def poisoned(self, ex, rng, t_switch=0, T=None, hard=True):
        raise ad.NonFiniteError("injected NaN")

    monkeypatch.setattr(harness.GraphModel, "loss", poisoned)
    with pytest.raises(harness.TrainingAborted):
        harness.train(small_cfg(epochs=1), None, tmp_path, examples=tiny[0], meta=tiny[1])
    dump = json.loads((tmp_path / "abort_dump.json").read_text())
    assert dump["epoch"] == 1 and "injected" in dump["error"]


def test_optimizer_refuses_non_finite_gradients():
    p = ad.Parameter(np.zeros(3))
    opt = Adam([p])
    with pytest.raises(ad.NonFiniteError):
        opt.step({p: np.array([np.nan, 0.0, 0.0])})


def test_optimizer_clips_global_norm():
    p = ad.Parameter(np.zeros(2))
    opt = Adam([p], lr=0.1, clip_norm=1.0)
    norm = opt.step({p: np.array([30.0, 40.0])})
    assert norm == pytest.approx(50.0)
    # first Adam step moves each coordinate by ~lr regardless of scale
    np.testing.assert_allclose(p.data, [-0.1, -0.1], rtol=1e-4)


def test_perfect_decoder_scores_one(tiny):
    cfg = small_cfg("gnn-mean")
    examples = [e for e in tiny[0] if e.split == "test"]
    model = harness.build_model(cfg, examples[0].features.shape[1], 16)

    def oracle(ex, rng, samples=None, T=None):
        probs = np.full((ex.n_nodes, 16), 1e-3)
        probs[np.arange(ex.n_nodes), ex.targets] = 1.0
        return probs / probs.sum(axis=1, keepdims=True)

    model.predict_proba = oracle
    report = harness.evaluate_model(model, examples, 0)
    assert report["accuracy"] == 1.0
    assert report["n_nodes"] == sum(e.mask.sum() for e in examples)


def test_puzzle_eval_reports_tau():
    examples, meta = make_dataset("puzzle", 0, size=12, d=2, n_train=0, n_val=0, n_test=3)
    model = harness.build_model(small_cfg(), examples[0].features.shape[1], 4)
    model.predict_proba = lambda ex, rng, samples=None, T=None: np.eye(4)[ex.targets] * 0.9 + 0.025
    report = harness.evaluate_model(model, examples, 0)
    assert report["kendall_tau"] == 1.0 and report["accuracy"] == 1.0


def test_evaluation_is_thread_count_independent(tiny, monkeypatch):
    model = harness.build_model(small_cfg(), tiny[0][0].features.shape[1], 16)
    test = [e for e in tiny[0] if e.split != "train"]
    monkeypatch.setenv("PMP_THREADS", "1")
    one = harness.evaluate_model(model, test, 0, batch_size=2)
    monkeypatch.setenv("PMP_THREADS", "3")
    three = harness.evaluate_model(model, test, 0, batch_size=2)
    assert one == three


def test_packed_loss_is_mean_of_instances(tiny):
    cfg = small_cfg("gnn-mean")
    ex = [e for e in tiny[0] if e.split == "train"][:3]
    with ad.precision(64):
        model = harness.build_model(cfg, ex[0].features.shape[1], 16)
        model.astype(np.float64)
        rng = np.random.default_rng(0)
        single = [model.loss(e, rng).loss.item() for e in ex]
        packed = model.loss(collate(ex), rng).loss.item()
    assert packed == pytest.approx(np.mean(single), rel=1e-10)


def test_grad_check_cli(capsys):
    assert cli.main(["grad-check"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 3


def test_grad_check_catches_wrong_sign():
    reports = harness.run_grad_check(RunConfig(), kinds=("gnn-mean",), grad_transform=lambda gs: {p: -g for p, g in gs.items()})
    assert not reports["gnn-mean"].passed(1e-4)


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "w.pmpd"
    assert cli.main(["gen-data", "--task", "whereami", "--out", str(data), "--grid-k", "4", "--n-objects", "4",
                     "--n-glyphs", "3", "--n-train", "4", "--n-val", "2", "--n-test", "2"]) == 0
    small_cfg("pmp", epochs=1).save(tmp_path / "cfg.json")
    assert cli.main(["train", "--config", str(tmp_path / "cfg.json"), "--data", str(data),
                     "--out", str(tmp_path / "run")]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--ckpt", str(tmp_path / "run" / "best.ckpt"), "--data", str(data),
                     "--samples", "1"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert 0.0 <= report["accuracy"] <= 1.0 and report["samples"] == 1


def test_cli_reports_errors(tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"model": {"nope": 1}}')
    code = cli.main(["train", "--config", str(tmp_path / "bad.json"), "--data", "x", "--out", str(tmp_path)])
    assert code == 2
    assert "nope" in capsys.readouterr().err
