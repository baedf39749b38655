"""Small shared builders for the method/engine/cli tests."""
import numpy as np

from clbench.data import split_tasks, synth_train_test
from clbench.engine import TrainConfig
from clbench.nn import preset


def synth_stream(K=2, classes=4, per_class=40, test_per_class=20, dim=16, seed=0, order_seed=1, noise=0.3):
    tr, te = synth_train_test(classes, per_class, test_per_class, dim, seed, noise)
    return split_tasks(tr, K, order_seed, te)


def mlp(depth=2, width=32, classes=4, dim=16):
    return preset(f"mlp:{depth},{width}", classes, in_features=dim)


def fast_cfg(epochs=3, seed=0, lr=0.05, batch_size=16):
    return TrainConfig(epochs, epochs, batch_size, lr, seed=seed)


def stable_weights(result):
    return {k: v.copy() for k, v in result.state.stable.state_dict().items()}


def same_weights(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
