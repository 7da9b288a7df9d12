import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irdistill import moe
from irdistill import tensor as T
from irdistill.errors import ConfigurationError, ContractError
from irdistill.experts import EXPERT_NAMES, apply_expert
from irdistill.moe import RoutingRecord
from irdistill.tensor import Tensor


@pytest.fixture(autouse=True)
def float64():
    with T.default_dtype(np.float64):
        yield


def router(seed=0, C=4, K=4):
    return moe.init_router(np.random.default_rng(seed), C, K)


def zero_experts(a):
    """Zero the output stage of every expert that has one (diffusion does not)."""
    for la in a.layers.values():
        for name, p in la.experts.items():
            if name == "spd":
                p.synthesis.data[:] = 0
            elif name == "hplsm":
                for t in (p.base_w, p.base_b, p.hyp2_w, p.hyp2_b, p.fc_b):
                    t.data[:] = 0
            elif name == "tgds":
                p.agg_w.data[:] = 0


# --- route_weights --------------------------------------------------------
def test_zero_second_layer_gives_uniform():
    r = router()
    r.W2.data[:] = 0
    x = np.random.default_rng(1).normal(size=(3, 4, 5, 5))
    np.testing.assert_allclose(moe.route_weights(x, r).data, 0.25, atol=1e-15)


def test_biased_router_matches_softmax():
    r = router()
    r.W2.data[:] = 0
    r.b2.data[:] = [10, 0, 0, 0]
    w = moe.route_weights(np.random.default_rng(2).normal(size=(2, 4, 4, 4)), r).data
    e = np.exp([10.0, 0, 0, 0])
    np.testing.assert_allclose(w, np.tile(e / e.sum(), (2, 1)), rtol=1e-14)
    assert round(w[0, 0], 5) == 0.99986


def test_identical_inputs_identical_weights():
    r = router(3)
    x = np.random.default_rng(4).normal(size=(1, 4, 6, 6))
    w = moe.route_weights(np.concatenate([x, x]), r).data
    assert w[0].tobytes() == w[1].tobytes()


def test_router_channel_mismatch():
    with pytest.raises(ConfigurationError):
        moe.route_weights(np.zeros((1, 3, 4, 4)), router())


def test_router_simplex_on_10000_inputs():
    rng = np.random.default_rng(5)
    r = router(6)
    w = moe.route_weights(rng.normal(scale=3.0, size=(10000, 4, 2, 2)), r).data
    assert w.min() >= 0
    assert np.abs(w.sum(axis=1) - 1).max() <= 1e-9


# --- fuse_experts ---------------------------------------------------------
def experts_for(seed=7, C=4):
    from irdistill.experts import init_experts
    return init_experts(np.random.default_rng(seed), C)


@pytest.mark.parametrize("i", range(4))
def test_one_hot_fusion_selects_expert(i):
    ex = experts_for()
    x = np.random.default_rng(8).normal(size=(2, 4, 6, 6))
    w = np.zeros((2, 4))
    w[:, i] = 1.0
    want = apply_expert(EXPERT_NAMES[i], x, ex[EXPERT_NAMES[i]]).data
    np.testing.assert_array_equal(moe.fuse_experts(x, w, ex).data, want)


def test_uniform_fusion_of_identities_is_identity():
    x = np.random.default_rng(9).normal(size=(1, 4, 5, 5))
    w = np.full((1, 4), 0.25)
    out = moe.fuse_experts(x, w, experts_for(), outputs=[x] * 4).data
    np.testing.assert_allclose(out, x, atol=1e-15)


def test_fusion_matches_weighted_sum():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(3, 4, 5, 5))
    outs = [rng.normal(size=x.shape) for _ in range(4)]
    w = rng.dirichlet(np.ones(4), size=3)
    want = np.zeros_like(x)
    for n in range(3):
        for i in range(4):
            want[n] += w[n, i] * outs[i][n]
    np.testing.assert_allclose(moe.fuse_experts(x, w, experts_for(), outputs=outs).data, want, atol=1e-12)


@settings(max_examples=20)
@given(st.floats(0, 1))
def test_fusion_linear_in_weights(alpha):
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 4, 4, 4))
    outs = [rng.normal(size=x.shape) for _ in range(4)]
    w1, w2 = rng.dirichlet(np.ones(4), size=2), rng.dirichlet(np.ones(4), size=2)
    ex = experts_for()
    lhs = moe.fuse_experts(x, alpha * w1 + (1 - alpha) * w2, ex, outputs=outs).data
    rhs = alpha * moe.fuse_experts(x, w1, ex, outputs=outs).data + (1 - alpha) * moe.fuse_experts(x, w2, ex, outputs=outs).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_fusion_shape_mismatch():
    x = np.zeros((1, 4, 4, 4))
    with pytest.raises(ContractError):
        moe.fuse_experts(x, np.full((1, 4), 0.25), experts_for(), outputs=[x, x, x, np.zeros((1, 4, 4, 3))])


# --- adapter_apply --------------------------------------------------------
def test_zero_experts_make_adapter_identity():
    # diffusion smooths but cannot output zero, so the zeroed set omits it
    a = moe.init_adapter(np.random.default_rng(12), 4, (3, 4), expert_names=("spd", "hplsm", "tgds"))
    zero_experts(a)
    rng = np.random.default_rng(13)
    x_in, block_out = rng.normal(size=(2, 16, 4)), rng.normal(size=(2, 16, 4))
    for layer in (3, 4):
        out, _ = moe.adapter_apply(block_out, x_in, layer, a)
        np.testing.assert_array_equal(out.data, block_out)


def test_single_expert_adapter():
    a = moe.init_adapter(np.random.default_rng(16), 4, (4,), expert_names=("hplsm",))
    x_in = np.random.default_rng(17).normal(size=(1, 4, 4, 4))
    block_out = np.random.default_rng(18).normal(size=(1, 4, 4, 4))
    out, rec = moe.adapter_apply(block_out, x_in, 4, a)
    np.testing.assert_array_equal(rec.weights.data, [[1.0]])
    want = block_out + apply_expert("hplsm", x_in, a.layers[4].experts["hplsm"]).data
    np.testing.assert_allclose(out.data, want, atol=1e-14)


def test_adapter_equals_route_then_fuse():
    a = moe.init_adapter(np.random.default_rng(19), 4, (3, 4))
    x_in = Tensor(np.random.default_rng(20).normal(size=(2, 4, 4, 4)))
    block_out = np.random.default_rng(21).normal(size=(2, 4, 4, 4))
    la = a.layers[4]
    w = moe.route_weights(x_in, la.router)
    want = block_out + moe.fuse_experts(x_in, w, la.experts).data
    out, rec = moe.adapter_apply(block_out, x_in, 4, a)
    np.testing.assert_allclose(out.data, want, atol=1e-13)
    np.testing.assert_array_equal(rec.weights.data, w.data)


def test_adapter_rejects_uninjected_layer():
    a = moe.init_adapter(np.random.default_rng(0), 4, (3, 4))
    with pytest.raises(ContractError):
        moe.adapter_apply(np.zeros((1, 16, 4)), np.zeros((1, 16, 4)), 1, a)


def test_router_receives_gradient():
    a = moe.init_adapter(np.random.default_rng(22), 4, (4,))
    x_in = np.random.default_rng(23).normal(size=(2, 4, 4, 4))
    out, _ = moe.adapter_apply(np.zeros_like(x_in), x_in, 4, a)
    R = np.random.default_rng(24).normal(size=x_in.shape)
    T.backward(T.tsum(out * R), params=a.parameters())
    assert np.abs(a.layers[4].router.W2.grad).max() > 0


def test_adapter_parameter_names():
    a = moe.init_adapter(np.random.default_rng(0), 4, (3, 4))
    names = [n for n, _ in a.named_parameters()]
    assert any(n.startswith("layer3.router.") for n in names)
    assert any(n.startswith("layer4.experttgds.") for n in names)


def test_empty_expert_set():
    with pytest.raises(ContractError):
        moe.init_adapter(np.random.default_rng(0), 4, (4,), expert_names=())


# --- routing statistics ---------------------------------------------------
def rec(w):
    return RoutingRecord(Tensor(np.asarray(w, dtype=float)))


def test_uniform_routing_ties_to_lowest():
    f, P = moe.accumulate_routing_stats([rec(np.full((5, 4), 0.25))])
    np.testing.assert_array_equal(f, [1, 0, 0, 0])
    np.testing.assert_allclose(P.data, 0.25)


def test_one_hot_routing():
    f, P = moe.accumulate_routing_stats([rec([[0, 1, 0, 0]] * 3)])
    np.testing.assert_array_equal(f, [0, 1, 0, 0])
    np.testing.assert_array_equal(P.data, [0, 1, 0, 0])


def test_mixed_batch_enumeration():
    w = [[0.7, 0.1, 0.1, 0.1],
         [0.1, 0.6, 0.2, 0.1],
         [0.2, 0.2, 0.5, 0.1],
         [0.4, 0.4, 0.1, 0.1]]     # tie between 0 and 1 goes to 0
    f, P = moe.accumulate_routing_stats([rec(w[:2]), rec(w[2:])])
    np.testing.assert_array_equal(f, [0.5, 0.25, 0.25, 0.0])
    np.testing.assert_allclose(P.data, [0.35, 0.325, 0.225, 0.1], atol=1e-15)
    assert abs(f.sum() - 1) <= 1e-6 and abs(P.data.sum() - 1) <= 1e-6


def test_no_records():
    with pytest.raises(ContractError):
        moe.accumulate_routing_stats([])
