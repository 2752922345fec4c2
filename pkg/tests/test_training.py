import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apct import tensor as tn
from apct import training
from apct.errors import ConfigError, ContractError, FormatError, TrainingDiverged
from apct.geometry import gen_shape
from apct.model import ModelConfig, forward_groups, init_params, prepare_batch
from apct.rng import keyed_rng
from apct.tensor import AdamWState, Tape, Tensor
from apct.training import (
    GroupedSplit,
    TrainConfig,
    TrainLog,
    aux_loss,
    effective_config,
    evaluate,
    lr_at,
    one_hot,
    read_predictions,
    total_loss,
    train,
    warmup_steps,
    write_predictions,
)

UNIFORM4 = math.sqrt(0.75)


def test_aux_loss_examples():
    target = one_hot([2], 4)
    assert float(aux_loss(target, target).data) == 0.0
    uniform = np.full((1, 4), 0.25)
    assert float(aux_loss(uniform, target.astype(np.float64)).data) == pytest.approx(UNIFORM4, abs=1e-12)
    probs = np.random.default_rng(0).dirichlet(np.ones(4), 1)
    one = float(aux_loss(probs, target.astype(np.float64)).data)
    two = float(aux_loss(np.repeat(probs, 2, 0), np.repeat(target, 2, 0).astype(np.float64)).data)
    assert one == pytest.approx(two, abs=1e-12)


def test_aux_loss_shape_mismatch():
    with pytest.raises(ContractError):
        aux_loss(np.full((2, 4), 0.25), one_hot([0], 4))


def _logits():
    return Tensor(np.random.default_rng(1).standard_normal((3, 4)))


def test_total_loss_examples():
    labels = np.array([0, 3, 1])
    logits = _logits()
    ce = float(tn.cross_entropy(logits, labels).data)
    uniform = [Tensor(np.full((3, 4), 0.25))] * 2
    perfect = [Tensor(one_hot(labels, 4, np.float64))] * 2
    assert float(total_loss(logits, uniform, labels, 0.0).data) == ce
    assert float(total_loss(logits, perfect, labels, 1.0).data) == pytest.approx(ce, abs=1e-12)
    assert float(total_loss(logits, uniform, labels, 1.0).data) == pytest.approx(ce + 2 * UNIFORM4, abs=1e-12)
    with pytest.raises(ContractError):
        total_loss(logits, uniform[:1], labels, 1.0)


def test_cross_entropy_value():
    logits = _logits()
    labels = np.array([0, 3, 1])
    x = logits.data
    ref = np.mean([np.log(np.exp(x[i]).sum()) - x[i, labels[i]] for i in range(3)])
    assert float(tn.cross_entropy(logits, labels).data) == pytest.approx(ref, abs=1e-12)


# schedule --------------------------------------------------------------------


def test_lr_examples():
    cfg = TrainConfig(epochs=10, warmup_epochs=2, lr=1e-3, min_lr=1e-5)
    total = 100
    warm = warmup_steps(total, cfg)
    assert warm == 20
    assert lr_at(0, total, cfg) == 0.0
    assert lr_at(warm, total, cfg) == pytest.approx(1e-3)
    assert lr_at(total, total, cfg) == pytest.approx(1e-5)
    assert lr_at(60, total, cfg) == pytest.approx(1e-5 + (1e-3 - 1e-5) / 2)
    with pytest.raises(ContractError):
        lr_at(total + 1, total, cfg)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 40), st.integers(1, 30), st.data())
def test_lr_continuity(epochs, per_epoch, data):
    # the stated bound needs the cosine phase to cover at least half the run
    warm_epochs = data.draw(st.integers(0, epochs // 2))
    cfg = TrainConfig(epochs=epochs, warmup_epochs=warm_epochs, lr=5e-4, min_lr=1e-6)
    total = epochs * per_epoch
    warm = max(warmup_steps(total, cfg), 1)
    bound = cfg.lr / warm + (cfg.lr - cfg.min_lr) * math.pi / total
    lrs = [lr_at(s, total, cfg) for s in range(total + 1)]
    assert max(abs(b - a) for a, b in zip(lrs, lrs[1:])) <= bound + 1e-15
    assert all(cfg.min_lr - 1e-15 <= v <= cfg.lr + 1e-15 for v in lrs[warm:])


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=3, warmup_epochs=3)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"epoch": 3})


@pytest.mark.parametrize("drop,aux", [(False, False), (False, True), (True, False), (True, True)])
def test_ablation_cells(drop, aux):
    cfg = effective_config(ModelConfig(), TrainConfig(drop=drop, aux=aux))
    assert cfg.drop is drop
    assert cfg.aux_weight == (1.0 if aux else 0.0)


# optimisation ----------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_single_step_decreases_loss(seed):
    cfg = ModelConfig()
    params = init_params(cfg, seed)
    label = seed % 8
    centers, rel = prepare_batch([gen_shape(label, 500 + seed, 256)], cfg)
    labels = np.array([label])
    with Tape() as tape:
        out = forward_groups(centers, rel, cfg, params, train=True, rng=keyed_rng("step", seed))
        loss = training.loss_for(out, labels, cfg)
    grads = tn.backward(tape, loss, params.values())
    tn.adamw_step(params, {k: grads[p] for k, p in params.items()}, AdamWState(), lr=1e-4, weight_decay=0.05)
    after = forward_groups(centers, rel, cfg, params, train=True, masks=out.masks)
    assert float(training.loss_for(after, labels, cfg).data) < float(loss.data)


def test_plain_objective_when_off(tiny_cfg, tiny_params, tiny_clouds):
    cfg = effective_config(tiny_cfg, TrainConfig(drop=False, aux=False))
    centers, rel = prepare_batch(tiny_clouds, cfg)
    labels = np.arange(8)
    out = forward_groups(centers, rel, cfg, tiny_params, train=True, with_aux=False)
    assert float(training.loss_for(out, labels, cfg).data) == float(tn.cross_entropy(out.logits, labels).data)


@pytest.fixture(scope="module")
def tiny_splits():
    cfg = ModelConfig(n_tokens=8, group_size=8, dim=16, heads=2, depths=[1, 1, 1], k=2)
    tr = [gen_shape(c % 8, 1000 + c, 64, f"tr{c}") for c in range(24)]
    te = [gen_shape(c % 8, 2000 + c, 64, f"te{c}") for c in range(8)]
    return cfg, GroupedSplit.from_clouds(tr, cfg), GroupedSplit.from_clouds(te, cfg)


def test_training_is_deterministic(tiny_splits):
    cfg, tr, te = tiny_splits
    tcfg = TrainConfig(epochs=3, batch_size=8, warmup_epochs=1, seed=4)
    _, p1, log1 = train(cfg, tcfg, tr, te)
    _, p2, log2 = train(cfg, tcfg, tr, te)
    assert len(log1.records) == 3
    assert log1.deterministic_view() == log2.deterministic_view()
    assert all(p1[k].data.tobytes() == p2[k].data.tobytes() for k in p1)
    assert TrainLog.from_dict(log1.to_dict()).deterministic_view() == log1.deterministic_view()


def test_baseline_cell_runs_vanilla(tiny_splits):
    cfg, tr, _ = tiny_splits
    eff, _, log = train(cfg, TrainConfig(epochs=2, batch_size=8, warmup_epochs=0, drop=False, aux=False), tr)
    assert not eff.drop and eff.aux_weight == 0.0
    assert all(r.eval_acc is None for r in log.records)


def test_divergence_keeps_last_good(tiny_splits, monkeypatch):
    cfg, tr, _ = tiny_splits
    real = training.loss_for
    calls = {"n": 0}

    def flaky(out, labels, c):
        calls["n"] += 1
        loss = real(out, labels, c)
        return loss * np.nan if calls["n"] == 5 else loss

    monkeypatch.setattr(training, "loss_for", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train(cfg, TrainConfig(epochs=3, batch_size=8, warmup_epochs=0), tr)
    assert info.value.step == 5
    assert set(info.value.last_good) == set(init_params(cfg))
    assert all(np.all(np.isfinite(v)) for v in info.value.last_good.values())


# evaluation ------------------------------------------------------------------


def test_evaluate_counts_and_determinism(tiny_splits, tiny_params):
    cfg, _, te = tiny_splits
    preds, acc = evaluate(cfg, tiny_params, te)
    again, acc2 = evaluate(cfg, tiny_params, te)
    assert len(preds) == len(te) and np.array_equal(preds, again) and acc == acc2
    assert acc == pytest.approx(np.mean(preds == te.labels))


def test_prediction_file_roundtrip(tmp_path):
    write_predictions(tmp_path / "p.csv", ["a", "b"], [1, 2], [1, 0])
    text = (tmp_path / "p.csv").read_text()
    assert text.splitlines()[0] == "id,pred,label"
    ids, p, l = read_predictions(tmp_path / "p.csv")
    assert ids == ["a", "b"] and p.tolist() == [1, 2] and l.tolist() == [1, 0]
    (tmp_path / "bad.csv").write_text("x,y\n")
    with pytest.raises(FormatError):
        read_predictions(tmp_path / "bad.csv")
    (tmp_path / "bad2.csv").write_text("id,pred,label\na,1\n")
    with pytest.raises(FormatError):
        read_predictions(tmp_path / "bad2.csv")
