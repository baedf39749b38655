"""Two-learner continual training loop.

Per task: the plastic learner is trained on the task data with plain
cross-entropy, frozen as the teacher, and the stable learner is then trained
with ``alpha*CE + (1-alpha)*KD(teacher) + L_CL``.  Only the stable learner is
evaluated.  Passing ``arch_plastic=None`` runs the usual single-learner
paradigm, where the stable learner minimises ``CE + L_CL``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .data import TaskStream
from .losses import LossConfig, ce_loss, kd_loss, stable_loss
from .methods import Method
from .metrics import AccuracyMatrix
from .nn import ArchSpec, Network, analytic_param_count, build, grow_classifier, param_count
from .optim import NonFiniteGradient, OptimizerState, sgd_step

_STABLE, _PLASTIC = 0, 1


class TrainingDivergence(RuntimeError):
    def __init__(self, task, phase, epoch, batch, loss, param=None):
        self.task, self.phase, self.epoch, self.batch, self.loss = task, phase, epoch, batch, loss
        self.param = param
        what = f"non-finite gradient in {param!r} at loss {loss}" if param else f"non-finite loss {loss}"
        super().__init__(f"{what} (task {task}, {phase} phase, epoch {epoch}, batch {batch})")


@dataclass
class TrainConfig:
    epochs_first: int = 200
    epochs_rest: int = 100
    batch_size: int = 128
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 1993

    def __post_init__(self):
        if self.epochs_first < 0 or self.epochs_rest < 0 or self.batch_size < 1 or self.lr0 < 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and lr0 >= 0")

    def epochs(self, task):
        return self.epochs_first if task == 0 else self.epochs_rest


@dataclass
class DualArchState:
    stream: TaskStream
    stable: Network
    plastic: Network | None
    method: Method
    loss_cfg: LossConfig
    train_cfg: TrainConfig
    teacher: Network | None = None
    prev_stable: Network | None = None
    task: int = 0
    n_old: int = 0
    events: list = field(default_factory=list)
    event_sink: object = None

    def log(self, **event):
        self.events.append(event)
        if self.event_sink is not None:
            self.event_sink.write(json.dumps(event) + "\n")


def _task_data(state, k):
    """Current-task training samples followed by replayed exemplars, with a replay mask."""
    train = state.stream.train
    cur = state.stream.train_idx[k]
    mem = state.method.replay_indices()
    idx = np.concatenate([cur, mem]) if mem.size else cur
    replay = np.zeros(idx.size, dtype=bool)
    replay[cur.size:] = True
    return train.x[idx], train.y[idx], replay


def _has_batchnorm(net):
    return any(name.endswith("running_mean") for name, _ in net.named_buffers())


def _fit(state, net, phase, x, y, replay, epochs, batch_loss):
    cfg = state.train_cfg
    k = state.task
    rng = np.random.default_rng([cfg.seed, _PLASTIC if phase == "plastic" else _STABLE, 1000 + k])
    opt = OptimizerState(lr=cfg.lr0, momentum=cfg.momentum, weight_decay=cfg.weight_decay, total_epochs=epochs)
    params = dict(net.named_parameters())
    bn = _has_batchnorm(net)
    net.train()
    n = len(y)
    tape = ag.get_tape()
    for epoch in range(epochs):
        opt.set_epoch(epoch, cfg.lr0)
        perm = rng.permutation(n)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            if bn and idx.size < 2:
                continue
            tape.clear()
            net.zero_grad()
            loss = batch_loss(x[idx], y[idx], replay[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                tape.clear()
                raise TrainingDivergence(k, phase, epoch, b, value)
            ag.backward(loss)
            try:
                sgd_step(params, opt)
            except NonFiniteGradient as e:
                tape.clear()
                raise TrainingDivergence(k, phase, epoch, b, value, e.param) from e
            total += value * idx.size
            seen += idx.size
        state.log(task=k, phase=phase, epoch=epoch, loss=total / max(seen, 1), lr=opt.lr)
    net.eval()


def train_task_plastic(state: DualArchState):
    """Cross-entropy only; never touches the previous stable snapshot."""
    k = state.task
    net = state.plastic
    n_total = (k + 1) * state.stream.classes_per_task
    grow_classifier(net, n_total - net.num_classes, np.random.default_rng([state.train_cfg.seed, _PLASTIC, k]))
    x, y, replay = _task_data(state, k)

    scope, n_old = state.method.ce_scope, state.n_old

    def batch_loss(xb, yb, _):
        # the host method's classification loss form (new-class slice for LwF), nothing else
        return _scoped_ce(net(ag.Tensor(xb, dtype=_dtype(net))), yb, scope, n_old)

    _fit(state, net, "plastic", x, y, replay, state.train_cfg.epochs(k), batch_loss)
    return net


def freeze_teacher(state: DualArchState):
    state.teacher = state.plastic.frozen()
    state.log(task=state.task, phase="freeze", epoch=None, loss=None, lr=None)
    return state.teacher


def _dtype(net):
    return net.head.weight.dtype


def _scoped_ce(logits, labels, scope, n_old):
    if scope == "new" and n_old > 0:
        return ce_loss(ag.slice_last(logits, n_old, logits.shape[1]), labels - n_old)
    return ce_loss(logits, labels)


def train_task_stable(state: DualArchState):
    k = state.task
    net = state.stable
    n_total = (k + 1) * state.stream.classes_per_task
    grow_classifier(net, n_total - net.num_classes, np.random.default_rng([state.train_cfg.seed, _STABLE, k]))
    x, y, replay = _task_data(state, k)
    lc = state.loss_cfg
    dual = state.plastic is not None
    alpha = lc.alpha if dual else 1.0
    teacher, prev, method, n_old = state.teacher, state.prev_stable, state.method, state.n_old

    def batch_loss(xb, yb, rb):
        logits = net(ag.Tensor(xb, dtype=_dtype(net)))
        ce = _scoped_ce(logits, yb, method.ce_scope, n_old)
        sel = None if lc.distill_on_replay or not rb.any() else np.flatnonzero(~rb)
        if sel is not None and sel.size == 0:
            return stable_loss(ce, None, None, alpha)
        student = logits if sel is None else ag.take_rows(logits, sel)
        x_sel = xb if sel is None else xb[sel]
        kd = None
        if dual and alpha < 1.0:
            with ag.no_grad():
                t_logits = teacher(ag.Tensor(x_sel, dtype=_dtype(net))).data
            n_t = min(t_logits.shape[1], student.shape[1])
            # under the "new" scope the teacher's own loss only shaped the current-task slice
            lo = n_old if method.ce_scope == "new" else 0
            s = student if (lo, n_t) == (0, student.shape[1]) else ag.slice_last(student, lo, n_t)
            kd = kd_loss(t_logits[:, lo:n_t], s, lc.temperature)
            if lc.kd_t2:
                kd = ag.scale(kd, lc.temperature ** 2)
        cl = method.cl_loss(x_sel, student, prev, n_old)
        return stable_loss(ce, kd, cl, alpha)

    _fit(state, net, "stable", x, y, replay, state.train_cfg.epochs(k), batch_loss)
    return net


def evaluate(state: DualArchState, matrix: AccuracyMatrix):
    """Score the stable learner on each seen task's test set; returns joint-test predictions."""
    k = state.task
    stream = state.stream
    preds, labels = [], []
    for b in range(k + 1):
        test = stream.task_test(b)
        p = state.method.classify(state.stable, test.x)
        matrix.record(k, b, int(np.sum(p == test.y)), len(test.y))
        preds.append(p)
        labels.append(test.y)
    return np.concatenate(preds), np.concatenate(labels)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: Network, directory, name):
    """Flat little-endian binary of all tensors plus a JSON manifest (name, shape, dtype, offset)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / f"{name}.bin", "wb") as f:
        for key, arr in net.state_dict().items():
            arr = np.ascontiguousarray(arr)
            raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
            f.write(raw)
            entries.append({"name": key, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>="),
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": 1, "file": f"{name}.bin", "spec": net.spec.to_dict() if net.spec else None,
                "tensors": entries}
    (directory / f"{name}.json").write_text(json.dumps(manifest, indent=1))
    return directory / f"{name}.json"


def load_checkpoint(manifest_path):
    """Return {name: array} from a manifest written by :func:`save_checkpoint`."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    raw = (manifest_path.parent / manifest["file"]).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        dt = np.dtype("<" + e["dtype"]) if e["dtype"][0] in "fiu" else np.dtype(e["dtype"])
        out[e["name"]] = np.frombuffer(raw, dtype=dt, count=int(np.prod(e["shape"], dtype=np.int64)),
                                       offset=e["offset"]).reshape(e["shape"]).copy()
    return out, manifest


# ---------------------------------------------------------------------------
# full stream
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    matrix: AccuracyMatrix
    predictions: np.ndarray
    labels: np.ndarray
    events: list
    live_params: list
    live_params_actual: list
    state: DualArchState = None

    @property
    def peak_params(self):
        return peak_param_report(self)


def peak_param_report(run, actual=False) -> int:
    """Maximum over steps of the summed parameter counts of all live models.

    By default every model is counted at its full final-head size (the
    per-architecture convention); ``actual=True`` uses the head sizes present
    at each step.
    """
    series = run.live_params_actual if actual else run.live_params
    return int(max(sum(step.values()) for step in series)) if series else 0


def _live(state, final_classes, nominal):
    def count(net):
        if nominal and net.spec is not None:
            return analytic_param_count(net.spec.with_classes(final_classes))
        return param_count(net)

    live = {"stable": count(state.stable)}
    if state.plastic is not None:
        live["plastic"] = count(state.plastic)
    if state.method.keeps_snapshot and state.prev_stable is not None:
        live["prev_stable"] = count(state.prev_stable)
    return live


def run_stream(stream: TaskStream, arch_stable: ArchSpec, arch_plastic: ArchSpec | None, method: Method,
               loss_cfg: LossConfig | None = None, train_cfg: TrainConfig | None = None,
               out_dir=None, event_sink=None, checkpoints="none") -> RunResult:
    """Train the stable (and optional plastic) learner over every task of ``stream``.

    ``checkpoints`` is "none", "final" or "every" (True means "every").
    """
    loss_cfg = loss_cfg or LossConfig()
    train_cfg = train_cfg or TrainConfig()
    n1 = stream.classes_per_task
    final = stream.train.num_classes
    stable = build(arch_stable.with_classes(n1), np.random.default_rng([train_cfg.seed, _STABLE]))
    plastic = None
    if arch_plastic is not None:
        plastic = build(arch_plastic.with_classes(n1), np.random.default_rng([train_cfg.seed, _PLASTIC]))
    state = DualArchState(stream, stable, plastic, method, loss_cfg, train_cfg, event_sink=event_sink)
    matrix = AccuracyMatrix(stream.K)
    live, live_actual = [], []
    preds = labels = None
    for k in range(stream.K):
        state.task = k
        state.n_old = k * n1
        method.before_task(state)
        if plastic is not None:
            train_task_plastic(state)
            freeze_teacher(state)
        train_task_stable(state)
        live.append(_live(state, final, nominal=True))
        live_actual.append(_live(state, final, nominal=False))
        method.after_task(state)
        preds, labels = evaluate(state, matrix)
        acc = matrix.a[k, : k + 1]
        state.log(task=k, phase="eval", epoch=None, loss=None, lr=None,
                  acc=[float(v) for v in acc], joint=float(matrix.joint[k]))
        state.prev_stable = state.stable.frozen()
        save = checkpoints in (True, "every") or (checkpoints == "final" and k == stream.K - 1)
        if save and out_dir is not None:
            ck = Path(out_dir) / "checkpoints" / f"task{k + 1}"
            save_checkpoint(state.stable, ck, "stable")
            if plastic is not None:
                save_checkpoint(state.plastic, ck, "plastic")
    return RunResult(matrix, preds, labels, state.events, live, live_actual, state)


def config_dict(loss_cfg, train_cfg):
    return {"loss": asdict(loss_cfg), "train": asdict(train_cfg)}
