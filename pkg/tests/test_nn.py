import numpy as np
import pytest

from clbench import autograd as ag
from clbench.autograd import Tensor
from clbench.losses import ce_loss
from clbench.nn import (ArchError, ArchSpec, Linear, Network, analytic_param_count, build, build_pla_net,
                        build_sta_net, conv_fc_depth, flops_estimate, grow_classifier, layer_summary, param_count,
                        preset, valid_resnet_depths)

# (spec, paper value in millions)
TABLE1 = [
    (ArchSpec("resnet", 18, 64, 100), 11.23),
    (ArchSpec("resnet", 10, 96, 100), 11.10),
    (ArchSpec("resnet", 26, 52, 100), 11.56),
    # 4x4/stride-3 pooling needs a 7x7 final map: the 7x7-stem network at 224 input
    (ArchSpec("resnet", 18, 64, 100, penultimate="avgpool4x4s3", small_image_stem=False, input_size=224), 11.38),
]
MLP_TAB = [(4, 800, 1.92), (3, 1050, 1.94), (5, 680, 1.93)]


@pytest.mark.parametrize("spec,paper", TABLE1, ids=lambda v: v.label() if isinstance(v, ArchSpec) else str(v))
def test_table1_counts(spec, paper):
    n = analytic_param_count(spec)
    assert abs(n / 1e6 - paper) / paper <= 0.01


@pytest.mark.parametrize("depth,width,paper", MLP_TAB)
def test_mlp_counts(depth, width, paper):
    net = build(ArchSpec("mlp", depth, width, 10, in_features=784))
    assert abs(param_count(net) / 1e6 - paper) / paper <= 0.01


@pytest.mark.parametrize("spec", [s for s, _ in TABLE1[:3]] + [preset("sta_net"), preset("pla_net")],
                         ids=lambda s: s.label())
def test_built_count_equals_closed_form(spec):
    assert param_count(build(spec)) == analytic_param_count(spec)


def test_linear_count_and_empty():
    net = Network(_linear_only(784, 800))
    assert param_count(net) == 784 * 800 + 800 == 628_000
    assert param_count(Network.empty()) == 0


def _linear_only(i, o):
    from clbench.nn import Sequential
    return Sequential([Linear(i, o, np.random.default_rng(0))])


def test_invalid_depth_lists_valid():
    with pytest.raises(ArchError) as e:
        ArchSpec("resnet", 14, 64, 10).validate()
    assert str(valid_resnet_depths()[:3])[1:-1] in str(e.value)
    with pytest.raises(ArchError):
        ArchSpec("mlp", 1, 10, 10).validate()


def test_depth_accounting():
    assert valid_resnet_depths()[:3] == [10, 18, 26]
    for d, b in [(10, 1), (18, 2), (26, 3)]:
        spec = ArchSpec("resnet", d, 8, 10)
        assert spec.blocks_per_stage == b
        assert conv_fc_depth(build(spec)) == d


def test_sta_net_properties():
    sta, r18 = build_sta_net(100), build(preset("resnet18"))
    assert param_count(sta) < param_count(r18)
    assert sta.feature_dim == 4 * r18.feature_dim
    assert sta.spec.depth == 10 and sta.spec.width == 64 and sta.spec.penultimate == "gap2x2"


@pytest.mark.parametrize("classes", [10, pytest.param(100, marks=pytest.mark.xfail(
    strict=True, reason="closed-form counts differ by 5.03% with a 100-class head"))])
def test_sta_pla_within_five_percent(classes):
    a = analytic_param_count(preset("sta_net", classes))
    b = analytic_param_count(preset("pla_net", classes))
    assert abs(a - b) / max(a, b) <= 0.05


def test_pla_net_forward_and_depth():
    net = build_pla_net(10)
    net.eval()
    with ag.no_grad():
        out = net(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32))).data
    assert out.shape == (1, 10) and np.all(np.isfinite(out))
    assert conv_fc_depth(net) == 18 and net.spec.width == 42


def test_width_monotone():
    counts = [analytic_param_count(ArchSpec("resnet", 18, w, 100)) for w in (16, 32, 42, 64)]
    assert counts == sorted(counts) and len(set(counts)) == 4
    counts = [analytic_param_count(ArchSpec("mlp", 4, w, 10)) for w in (100, 200, 800)]
    assert counts == sorted(counts)


def test_build_is_pure():
    spec = ArchSpec("resnet", 10, 4, 5)
    a, b = build(spec, rng=3), build(spec, rng=3)
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)
    c = build(spec, rng=4)
    assert [v.shape for v in c.state_dict().values()] == [v.shape for v in sa.values()]


def test_grow_classifier():
    net = build(ArchSpec("mlp", 3, 16, 2, in_features=6), rng=0)
    x = Tensor(np.random.default_rng(1).normal(size=(4, 6)).astype(np.float32))
    with ag.no_grad():
        before = net(x).data.copy()
    n0 = param_count(net)
    grow_classifier(net, 0)
    assert param_count(net) == n0
    grow_classifier(net, 2, rng=5)
    with ag.no_grad():
        after = net(x).data
    assert after.shape == (4, 4)
    np.testing.assert_array_equal(after[:, :2], before)
    assert param_count(net) - n0 == (net.feature_dim + 1) * 2
    assert net.spec.num_classes == 4


def test_flops():
    lin = Network(_linear_only(784, 800))
    assert flops_estimate(lin, (1, 784)) == 2 * 784 * 800
    assert flops_estimate(Network.empty(), (1, 3)) == 0
    sta, pla, r18 = (build(preset(n, 100)) for n in ("sta_net", "pla_net", "resnet18"))
    assert flops_estimate(sta) + flops_estimate(pla) < flops_estimate(r18)


def test_penultimate_shapes():
    for pen, feat in [("gap", 8 * 4), ("gap2x2", 4 * 8 * 4)]:
        net = build(ArchSpec("resnet", 10, 4, 3, penultimate=pen), rng=0)
        assert net.feature_dim == feat
    net = build(ArchSpec("resnet", 10, 4, 3, penultimate="avgpool4x4s3", small_image_stem=False, input_size=224))
    assert net.trace((1, 3, 224, 224))[0] == (1, 3)
    assert net.feature_dim == 4 * 32


def test_layer_summary_rows():
    rows = layer_summary(build(preset("mlp:3,20", 10, in_features=12)))
    assert rows[-1]["name"] == "head" and rows[-1]["output_shape"] == [1, 10]
    assert sum(r["params"] for r in rows) == analytic_param_count(preset("mlp:3,20", 10, in_features=12))


# every preset architecture at a toy size, float64, central differences with eps=1e-4
# (coordinates whose stencil crosses a relu/max-pool kink are re-probed with a smaller step)

TOY = {
    "resnet18": preset("resnet18", 3, width=2, input_size=8),
    "resnet18_7x7_stem": preset("resnet18", 3, width=2, small_image_stem=False, input_size=32),
    "sta_net": preset("sta_net", 3, width=2, input_size=16),
    "pla_net": preset("pla_net", 3, width=2, input_size=8),
    "resnet10_w3": preset("resnet:10,3", 3, input_size=8),
    "resnet26": preset("resnet:26,2", 3, input_size=8),
    "avgpool4x4s3": ArchSpec("resnet", 18, 2, 3, penultimate="avgpool4x4s3", input_size=28),
    "mlp": preset("mlp:4,6", 3, in_features=5),
}


@pytest.mark.parametrize("name", sorted(TOY))
def test_architecture_gradcheck(name):
    net = build(TOY[name], rng=0, dtype=np.float64)
    net.train()
    x = Tensor(np.random.default_rng(1).normal(size=net.input_shape(8)), dtype=np.float64)
    y = [i % 3 for i in range(8)]
    stats = ag.GradCheckStats()
    err = ag.check_gradients(lambda: ce_loss(net(x), y), net.parameters(), eps=1e-4, max_coords=8,
                             rng=np.random.default_rng(0), stats=stats)
    assert err <= 1e-3
    assert stats.unresolved == 0


def test_eval_mode_gradcheck():
    net = build(preset("sta_net", 3, width=2, input_size=16), rng=0, dtype=np.float64)
    x = Tensor(np.random.default_rng(2).normal(size=(4, 3, 16, 16)), dtype=np.float64)
    with ag.no_grad():
        for _ in range(5):
            net(x)  # populate running statistics
    net.eval()
    err = ag.check_gradients(lambda: ce_loss(net(x), [0, 1, 2, 0]), net.parameters(), max_coords=6,
                             rng=np.random.default_rng(0))
    assert err <= 1e-3
