"""Continual-learning strategies: fine-tune, ER, LwF, iCaRL and WA.

A method contributes an extra loss term on the stable learner, optional
replay through an :class:`ExemplarMemory`, end-of-task bookkeeping and the
inference rule.  Hooks receive the engine's state object and must not modify
the previous-model snapshot.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .data import ExemplarMemory, l2_normalize, memory_update
from .losses import kd_loss

METHODS = ("finetune", "er", "lwf", "icarl", "wa")


def batched_apply(fn, x, batch_size=512):
    return np.concatenate([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def extract_features(net, x, batch_size=512):
    was_training = net.training
    net.eval()
    with ag.no_grad():
        out = batched_apply(lambda b: net.features(ag.Tensor(b, dtype=net_dtype(net))).data, x, batch_size)
    net.train(was_training)
    return out


def predict_logits(net, x, batch_size=512):
    was_training = net.training
    net.eval()
    with ag.no_grad():
        out = batched_apply(lambda b: net(ag.Tensor(b, dtype=net_dtype(net))).data, x, batch_size)
    net.train(was_training)
    return out


def net_dtype(net):
    params = net.parameters()
    return params[0].dtype if params else None


def nme_predict(features, class_means):
    """Nearest class mean by Euclidean distance; ties go to the lowest class index."""
    f = np.asarray(features, dtype=np.float64)
    mu = np.asarray(class_means, dtype=np.float64)
    d = ((f[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


class Method:
    name = "finetune"
    uses_memory = False
    keeps_snapshot = False
    # "all": cross-entropy over every logit seen so far; "new": only the current task's slice
    ce_scope = "all"

    def __init__(self, memory: ExemplarMemory | None = None):
        self.memory = memory if memory is not None else ExemplarMemory(0)

    def before_task(self, state):
        pass

    def cl_loss(self, x, logits, prev, n_old):
        """Extra loss on a batch (inputs ``x``, current logits tensor); None means zero."""
        return None

    def after_task(self, state):
        if self.uses_memory and self.memory.budget > 0:
            k = state.task
            memory_update(self.memory, state.stream.train, state.stream.task_classes(k),
                          lambda xb: extract_features(state.stable, xb))

    def classify(self, model, x):
        return np.argmax(predict_logits(model, x), axis=1)

    def replay_indices(self):
        if not self.uses_memory:
            return np.empty(0, dtype=np.int64)
        return self.memory.indices()


class FineTune(Method):
    name = "finetune"


class ExperienceReplay(Method):
    name = "er"
    uses_memory = True


class LwF(Method):
    """Distillation from the previous stable learner on old-class logits."""

    name = "lwf"
    keeps_snapshot = True

    def __init__(self, lam=1.0, temperature=2.0, memory=None, ce_scope="new"):
        super().__init__(memory)
        if ce_scope not in ("all", "new"):
            raise ValueError(f"ce_scope must be 'all' or 'new', got {ce_scope!r}")
        self.lam = float(lam)
        self.temperature = float(temperature)
        self._ce_scope = ce_scope

    @property
    def ce_scope(self):
        # the restricted CE belongs to the distillation mechanism: lam=0 falls back to fine-tune
        return self._ce_scope if self.lam > 0 else "all"

    def distill_weight(self, n_old, n_total):
        return self.lam

    def cl_loss(self, x, logits, prev, n_old):
        if prev is None or n_old == 0:
            return None
        lam = self.distill_weight(n_old, logits.shape[1])
        if lam == 0.0:
            return None
        with ag.no_grad():
            old = prev(ag.Tensor(x, dtype=logits.dtype)).data[:, :n_old]
        term = kd_loss(old, ag.slice_last(logits, 0, n_old), self.temperature)
        return term if lam == 1.0 else ag.scale(term, lam)


class ICaRL(LwF):
    """Replay + logit distillation, nearest-mean-of-exemplars inference."""

    name = "icarl"
    uses_memory = True

    def __init__(self, memory, lam=1.0, temperature=2.0):
        super().__init__(lam, temperature, memory, ce_scope="all")
        self.class_means = None

    def after_task(self, state):
        super().after_task(state)
        self.class_means = self.compute_means(state.stable, state.stream.train)

    def compute_means(self, model, train):
        n = model.num_classes
        means = np.zeros((n, model.feature_dim))
        for c, idx in self.memory.exemplars.items():
            if len(idx):
                f = l2_normalize(extract_features(model, train.x[idx]))
                means[c] = l2_normalize(f.mean(axis=0, keepdims=True))[0]
        return means

    def classify(self, model, x):
        if self.class_means is None:
            return super().classify(model, x)
        return nme_predict(l2_normalize(extract_features(model, x)), self.class_means)


def weight_align(head, n_old):
    """Rescale rows n_old: of the classifier so their mean L2 norm matches rows :n_old.

    Returns the factor gamma applied (1.0 when there is nothing to align).
    """
    w = head.weight.data
    if n_old <= 0 or n_old >= w.shape[0]:
        return 1.0
    old_norm = np.linalg.norm(w[:n_old].astype(np.float64), axis=1).mean()
    new_norm = np.linalg.norm(w[n_old:].astype(np.float64), axis=1).mean()
    gamma = float(old_norm / new_norm)
    w[n_old:] *= w.dtype.type(gamma)
    return gamma


class WA(LwF):
    """Replay + distillation weighted by old/total classes, then weight aligning."""

    name = "wa"
    uses_memory = True

    def __init__(self, memory=None, temperature=2.0, lam=None, align=True):
        super().__init__(1.0 if lam is None else lam, temperature, memory, ce_scope="all")
        self.fixed_lam = lam
        self.align = align
        self.gammas = []

    def distill_weight(self, n_old, n_total):
        if self.fixed_lam is not None:
            return float(self.fixed_lam)
        return n_old / n_total

    def after_task(self, state):
        n_old = state.n_old
        gamma = weight_align(state.stable.head, n_old) if self.align else 1.0
        self.gammas.append(gamma)
        super().after_task(state)


def make_method(name, memory_budget=0, **params) -> Method:
    """Method factory keyed by config name (finetune|er|lwf|icarl|wa)."""
    name = name.lower()
    mem = ExemplarMemory(int(memory_budget))
    if name == "finetune":
        return FineTune()
    if name == "er":
        return ExperienceReplay(mem)
    if name == "lwf":
        return LwF(lam=params.get("lambda", 1.0), temperature=params.get("temperature", 2.0),
                   ce_scope=params.get("ce_scope", "new"))
    if name == "icarl":
        return ICaRL(mem, lam=params.get("lambda", 1.0), temperature=params.get("temperature", 2.0))
    if name == "wa":
        return WA(mem, temperature=params.get("temperature", 2.0), lam=params.get("lambda"),
                  align=params.get("align", True))
    raise ValueError(f"unknown method {name!r}; expected one of {METHODS}")
