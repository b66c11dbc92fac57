import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cafo import tensor as T
from cafo.model import (
    BackboneConfig,
    DepCaConfig,
    ModelConfig,
    apply_attention,
    depca_forward,
    init_params,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)
from cafo.tensor import ShapeError, Tensor

from conftest import numeric_grad, rel_err

SMALL = ModelConfig(n_features=3, depca=DepCaConfig(gamma=2), backbone=BackboneConfig(conv_blocks=((4, 3, 2),), num_classes=3))


def _stack(seed, n=2, d=3, L=6):
    return np.random.default_rng(seed).normal(size=(n, d, L, L))


def test_zero_weights_give_half():
    cfg = ModelConfig(n_features=4)
    p = init_params(cfg)
    p["depca.weight"] = Tensor(np.zeros_like(p["depca.weight"].data))
    a = depca_forward(_stack(0, d=4), p, cfg.depca)
    np.testing.assert_array_equal(a.data, 0.5)


def test_single_unit_kernel():
    p = {"depca.weight": Tensor(np.ones((1, 1, 1, 1))), "depca.bias": Tensor(np.zeros((1, 1)))}
    a = depca_forward(np.ones((1, 4, 4)), p, DepCaConfig(gamma=1, kernel_size=1))
    assert a.data[0] == pytest.approx(1 / (1 + np.exp(-2.0)), abs=1e-12)
    assert a.data[0] == pytest.approx(0.8808, abs=1e-4)


def test_squidgame_dimensions():
    cfg = ModelConfig(n_features=30)
    p = init_params(cfg)
    x = Tensor(_stack(1, n=1, d=30, L=32))
    f_out = T.depthwise_conv2d(x, p["depca.weight"], p["depca.bias"])
    assert f_out.shape == (1, 90, 32, 32)
    logits, a = model_forward(x, p, cfg)
    assert a.shape == (1, 30) and logits.shape == (1, 3)


def test_strided_depca_matches_its_own_definition():
    cfg = DepCaConfig(gamma=2, stride=2)
    p = init_params(ModelConfig(n_features=3, depca=cfg))
    a = depca_forward(_stack(2), p, cfg)
    assert a.shape == (2, 3) and np.all((a.data > 0) & (a.data < 1))


def test_fused_and_generic_paths_agree():
    p = init_params(SMALL, seed=3)
    p["depca.bias"] = Tensor(np.random.default_rng(3).normal(size=(2, 3)))
    x = Tensor(_stack(4))
    fused = depca_forward(x, p, SMALL.depca).data
    f = T.depthwise_conv2d(x, p["depca.weight"], p["depca.bias"])
    g = f.reshape(2, 2, 3, 6, 6)
    avg = g.data.mean(axis=(3, 4)).mean(axis=1)
    mx = g.data.max(axis=(3, 4)).mean(axis=1)
    np.testing.assert_allclose(fused, 1 / (1 + np.exp(-(avg + mx))), atol=1e-12)


def test_apply_attention_examples():
    x = np.random.default_rng(5).normal(size=(3, 4, 4))
    np.testing.assert_array_equal(apply_attention(x, np.ones(3)).data, x)
    out = apply_attention(x, np.array([1.0, 0.0, 1.0])).data
    assert np.all(out[1] == 0)
    np.testing.assert_array_equal(apply_attention(np.full((1, 2, 2), 2.0), np.array([0.5])).data, np.ones((1, 2, 2)))


def test_apply_attention_shape_checked():
    with pytest.raises(ShapeError):
        apply_attention(np.ones((3, 4, 4)), np.ones(2))


def test_zero_final_layer_gives_uniform_softmax():
    p = init_params(SMALL)
    p["fc.weight"] = Tensor(np.zeros_like(p["fc.weight"].data))
    logits, _ = model_forward(_stack(6), p, SMALL)
    np.testing.assert_allclose(T.softmax(logits.data), 1 / 3)


def test_forward_is_deterministic():
    p = init_params(SMALL)
    a = model_forward(_stack(7), p, SMALL)[0].data
    b = model_forward(_stack(7), p, SMALL)[0].data
    assert a.tobytes() == b.tobytes()


def test_init_seeding():
    a, b, c = init_params(SMALL, 1), init_params(SMALL, 1), init_params(SMALL, 2)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not np.array_equal(a["depca.weight"].data, c["depca.weight"].data)


def test_fan_in_scaling():
    stds = []
    for k in (1, 3, 5):
        p = init_params(ModelConfig(n_features=50, depca=DepCaConfig(gamma=4, kernel_size=k)), seed=0)
        stds.append(p["depca.weight"].data.std())
    assert stds[0] > stds[1] > stds[2]


def test_feature_mismatch_rejected():
    p = init_params(SMALL)
    with pytest.raises(ShapeError):
        depca_forward(_stack(0, d=4), p, SMALL.depca)


@pytest.mark.parametrize("seed", range(10))
def test_end_to_end_gradient(seed):
    """DepCA + backbone + cross entropy against central differences."""
    p = init_params(SMALL, seed=seed)
    rng = np.random.default_rng(100 + seed)
    p["depca.bias"] = Tensor(rng.normal(scale=0.1, size=(2, 3)), requires_grad=True)
    x = _stack(seed)
    y = np.array([seed % 3, (seed + 1) % 3])

    def loss():
        logits, _ = model_forward(x, p, SMALL)
        return T.softmax_cross_entropy(logits, y)

    T.backward(loss())
    for name in ("depca.weight", "depca.bias", "conv0.weight", "fc.weight", "fc.bias"):
        t = p[name]
        def f():
            with T.no_grad():
                return loss().item()
        assert rel_err(t.grad, numeric_grad(f, t.data)) < 1e-4, name


def test_checkpoint_round_trip(tmp_path):
    p = init_params(SMALL, 9)
    save_checkpoint(tmp_path / "c.bin", p, SMALL, epoch=3, seed=9)
    q, cfg, header = load_checkpoint(tmp_path / "c.bin")
    assert cfg == SMALL and header["epoch"] == 3
    assert list(q) == list(p)
    assert all(np.array_equal(p[k].data, q[k].data) for k in p)


def test_checkpoint_truncation_detected(tmp_path):
    save_checkpoint(tmp_path / "c.bin", init_params(SMALL), SMALL, epoch=1, seed=0)
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "c.bin").write_bytes(raw[:-16])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "c.bin")


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(4)))
def test_attention_in_unit_interval_and_permutation_equivariant(seed, perm):
    cfg = ModelConfig(n_features=4, depca=DepCaConfig(gamma=2))
    p = init_params(cfg, seed % 7)
    p["depca.bias"] = Tensor(np.random.default_rng(seed).normal(size=(2, 4)))
    x = _stack(seed, d=4)
    a = depca_forward(x, p, cfg.depca).data
    assert np.all((a > 0) & (a < 1))
    perm = list(perm)
    pp = {"depca.weight": Tensor(p["depca.weight"].data[:, perm]), "depca.bias": Tensor(p["depca.bias"].data[:, perm])}
    np.testing.assert_allclose(depca_forward(x[:, perm], pp, cfg.depca).data, a[:, perm], atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_apply_attention_is_linear(s1, s2):
    rng = np.random.default_rng(0)
    x, a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    lhs = apply_attention(x, s1 * a + s2 * b).data
    rhs = s1 * apply_attention(x, a).data + s2 * apply_attention(x, b).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    np.testing.assert_allclose(apply_attention(s1 * x, a).data, s1 * apply_attention(x, a).data, atol=1e-12)
