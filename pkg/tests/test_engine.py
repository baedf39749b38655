import json

import numpy as np
import pytest

from clbench import autograd as ag
from clbench import engine, metrics
from clbench.data import Dataset, split_tasks
from clbench.engine import (DualArchState, TrainConfig, TrainingDivergence, load_checkpoint, peak_param_report,
                            run_stream, save_checkpoint, train_task_stable)
from clbench.losses import LossConfig, entropy, softmax_temperature
from clbench.methods import make_method
from clbench.nn import build, param_count
from helpers import fast_cfg, mlp, same_weights, stable_weights, synth_stream


class Poison:
    """Stand-in that fails on any use; proves a code path never touches a model."""

    def __getattr__(self, name):
        raise AssertionError(f"touched forbidden model attribute {name!r}")

    def __call__(self, *a, **k):
        raise AssertionError("called forbidden model")


def test_teacher_is_immutable_during_stable_training(monkeypatch):
    probe = np.random.default_rng(5).normal(size=(8, 16)).astype(np.float32)
    seen = []
    real = engine.train_task_stable

    def wrapped(state):
        before = state.teacher(ag.Tensor(probe)).data.copy()
        out = real(state)
        seen.append(np.array_equal(before, state.teacher(ag.Tensor(probe)).data))
        return out

    monkeypatch.setattr(engine, "train_task_stable", wrapped)
    run_stream(synth_stream(), mlp(), mlp(3, 16), make_method("lwf"), train_cfg=fast_cfg())
    assert seen == [True, True]


def test_plastic_phase_never_reads_prev_stable(monkeypatch):
    real = engine.train_task_plastic

    def wrapped(state):
        saved, state.prev_stable = state.prev_stable, Poison()
        try:
            return real(state)
        finally:
            state.prev_stable = saved

    monkeypatch.setattr(engine, "train_task_plastic", wrapped)
    run_stream(synth_stream(), mlp(), mlp(3, 16), make_method("icarl", 20), train_cfg=fast_cfg(epochs=1))


def test_evaluation_touches_only_the_stable_learner(monkeypatch):
    real = engine.evaluate

    def wrapped(state, matrix):
        saved = state.plastic, state.teacher, state.prev_stable
        state.plastic = state.teacher = state.prev_stable = Poison()
        try:
            return real(state, matrix)
        finally:
            state.plastic, state.teacher, state.prev_stable = saved

    monkeypatch.setattr(engine, "evaluate", wrapped)
    run_stream(synth_stream(), mlp(), mlp(3, 16), make_method("lwf"), train_cfg=fast_cfg(epochs=1))


def test_event_order_plastic_freeze_stable_eval():
    r = run_stream(synth_stream(), mlp(), mlp(3, 16), make_method("lwf"), train_cfg=fast_cfg(epochs=2))
    for k in range(2):
        phases = [e["phase"] for e in r.events if e["task"] == k]
        assert phases == ["plastic", "plastic", "freeze", "stable", "stable", "eval"]
    assert all({"task", "phase", "epoch", "loss", "lr"} <= set(e) for e in r.events)


def test_alpha_one_finetune_equals_single_learner():
    s = synth_stream()
    single = run_stream(s, mlp(), None, make_method("finetune"), train_cfg=fast_cfg())
    dual = run_stream(s, mlp(), mlp(3, 16), make_method("finetune"), LossConfig(alpha=1.0), fast_cfg())
    assert same_weights(stable_weights(single), stable_weights(dual))
    assert np.array_equal(single.matrix.a, dual.matrix.a, equal_nan=True)


def test_zero_epochs_leaves_weights_unchanged():
    s = synth_stream(K=1, classes=2)
    cfg = TrainConfig(0, 0, 16, 0.1, seed=4)
    r = run_stream(s, mlp(classes=2), mlp(3, 16, classes=2), make_method("finetune"), train_cfg=cfg)
    fresh_s = build(mlp(classes=2), np.random.default_rng([4, 0]))
    fresh_p = build(mlp(3, 16, classes=2), np.random.default_rng([4, 1]))
    assert same_weights(fresh_s.state_dict(), r.state.stable.state_dict())
    assert same_weights(fresh_p.state_dict(), r.state.plastic.state_dict())


def test_plastic_overfits_32_samples():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(32, 16)).astype(np.float32)
    y = np.repeat([0, 1], 16)
    s = split_tasks(Dataset(x, y, 2), 1, 0)
    r = run_stream(s, mlp(classes=2), mlp(2, 64, classes=2), make_method("finetune"),
                   train_cfg=TrainConfig(60, 60, 8, 0.05, seed=0))
    pred = make_method("finetune").classify(r.state.plastic, s.train.x)
    assert np.mean(pred == s.train.y) >= 0.99


def test_stationary_loss_with_self_teacher():
    s = synth_stream(K=1, classes=2)
    net = build(mlp(classes=2), rng=0)
    teacher = net.frozen()
    state = DualArchState(s, net, teacher, make_method("finetune"), LossConfig(alpha=0.0, temperature=2.0),
                          TrainConfig(3, 3, 16, 0.0, seed=0), teacher=teacher)
    before = net.state_dict()
    train_task_stable(state)
    losses = [e["loss"] for e in state.events]
    assert same_weights(before, net.state_dict())
    assert np.allclose(losses, losses[0], rtol=1e-6)
    p = softmax_temperature(teacher(ag.Tensor(s.train.x)).data.astype(np.float64), 2.0)
    assert losses[0] == pytest.approx(entropy(p), rel=1e-5)


def test_single_task_matrix():
    r = run_stream(synth_stream(K=1), mlp(), None, make_method("finetune"), train_cfg=fast_cfg())
    assert r.matrix.a.shape == (1, 1) and r.matrix.a[0, 0] == r.matrix.joint[0]


def test_determinism():
    s = synth_stream()
    a = run_stream(s, mlp(), mlp(3, 16), make_method("icarl", 20), train_cfg=fast_cfg(seed=7))
    b = run_stream(s, mlp(), mlp(3, 16), make_method("icarl", 20), train_cfg=fast_cfg(seed=7))
    assert np.array_equal(a.matrix.a, b.matrix.a, equal_nan=True)
    assert same_weights(stable_weights(a), stable_weights(b))
    assert a.events == b.events


def test_checkpoint_roundtrip(tmp_path):
    r = run_stream(synth_stream(), mlp(), mlp(3, 16), make_method("lwf"), train_cfg=fast_cfg(epochs=1),
                   out_dir=tmp_path, checkpoints="every")
    for k in (1, 2):
        assert (tmp_path / "checkpoints" / f"task{k}" / "plastic.json").exists()
    state, manifest = load_checkpoint(tmp_path / "checkpoints" / "task2" / "stable.json")
    assert same_weights(state, r.state.stable.state_dict())
    e = manifest["tensors"][0]
    assert {"name", "shape", "dtype", "offset", "nbytes"} <= set(e)
    net = build(mlp(), rng=99)
    net.load_state_dict(state)
    x = synth_stream().test.x[:5]
    assert np.array_equal(net(ag.Tensor(x)).data, r.state.stable(ag.Tensor(x)).data)
    # a standalone save in a fresh directory too
    p = save_checkpoint(net, tmp_path / "one", "net")
    assert json.loads(p.read_text())["file"] == "net.bin"


def test_final_checkpoint_only(tmp_path):
    run_stream(synth_stream(), mlp(), None, make_method("finetune"), train_cfg=fast_cfg(epochs=1),
               out_dir=tmp_path, checkpoints="final")
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["task2"]


def _count(arch, classes=4):
    return param_count(build(arch.with_classes(classes), rng=0))


def test_peak_params():
    s = synth_stream()
    st, pl = mlp(), mlp(3, 16)
    ft = run_stream(s, st, None, make_method("finetune"), train_cfg=fast_cfg(epochs=1))
    assert peak_param_report(ft) == _count(st)
    ic = run_stream(s, st, None, make_method("icarl", 20), train_cfg=fast_cfg(epochs=1))
    assert peak_param_report(ic) == 2 * _count(st)
    dual = run_stream(s, st, pl, make_method("icarl", 20), train_cfg=fast_cfg(epochs=1))
    assert peak_param_report(dual) == _count(pl) + 2 * _count(st)
    # the snapshot still has the smaller head, so the step-by-step count is lower
    assert peak_param_report(dual, actual=True) < peak_param_report(dual)


def test_dual_lwf_keeps_task_one_at_least_as_well_as_finetune():
    dual, base = [], []
    for seed in (1, 2, 3):
        s = synth_stream(seed=seed, order_seed=seed, noise=0.5)
        cfg = fast_cfg(epochs=5, seed=seed)
        dual.append(run_stream(s, mlp(), mlp(3, 16), make_method("lwf"), train_cfg=cfg).matrix.a[1, 0])
        base.append(run_stream(s, mlp(), None, make_method("finetune"), train_cfg=cfg).matrix.a[1, 0])
    assert np.mean(dual) >= np.mean(base)


def test_architecture_swap_needs_only_config():
    s = synth_stream()
    r = run_stream(s, mlp(3, 16), mlp(), make_method("lwf"), train_cfg=fast_cfg(epochs=1))
    assert metrics.aan(r.matrix) >= 0


def test_nan_inputs_flag_the_gradient():
    s = synth_stream(K=1)
    s.train.x[:] = np.nan
    with pytest.raises(TrainingDivergence) as e:
        run_stream(s, mlp(), None, make_method("finetune"), train_cfg=fast_cfg())
    assert e.value.param is not None or not np.isfinite(e.value.loss)


def test_exploding_lr_diverges():
    with pytest.raises(TrainingDivergence) as e:
        run_stream(synth_stream(K=1), mlp(), None, make_method("finetune"),
                   train_cfg=TrainConfig(20, 20, 16, 1e8, seed=0))
    assert e.value.phase == "stable" and "epoch" in str(e.value)


def test_kd_t2_scales_only_the_teacher_term():
    # with lr 0 nothing moves, so the logged loss is the loss at initialisation
    s = synth_stream(K=1, classes=2)
    out = {}
    for t2 in (False, True):
        cfg = TrainConfig(1, 1, 16, 0.0, seed=0)
        r = run_stream(s, mlp(classes=2), mlp(3, 16, classes=2), make_method("finetune"),
                       LossConfig(alpha=0.0, temperature=3.0, kd_t2=t2), cfg)
        out[t2] = [e["loss"] for e in r.events if e["phase"] == "stable"][0]
    assert out[True] == pytest.approx(9.0 * out[False], rel=1e-5)


def test_lwf_dual_kd_covers_the_new_slice_only(monkeypatch):
    seen = []
    real = engine.kd_loss

    def spy(t, s, temp):
        seen.append(s.shape[1])
        return real(t, s, temp)

    monkeypatch.setattr(engine, "kd_loss", spy)
    run_stream(synth_stream(), mlp(), mlp(3, 16), make_method("lwf"), train_cfg=fast_cfg(epochs=1))
    assert set(seen) == {2}
    seen.clear()
    run_stream(synth_stream(), mlp(), mlp(3, 16), make_method("icarl", 20), train_cfg=fast_cfg(epochs=1))
    assert set(seen) == {2, 4}
