"""Residual blocks, batch norm, the network and its parameter file."""

import numpy as np
import pytest
from pydantic import ValidationError

from errors import BatchSizeError, ConfigError, ForwardCacheError, ShapeError
from nn.layers import (
    EVAL, TRAIN, AffineLayer, BatchNormState, NetworkConfig, ResidualBlock,
    block_forward, bn_forward, build_network, network_backward, network_forward,
)
from nn.params import decode, encode, load_params, save_params
from tensor.core import Rng, gauss_draw


def _block(width=4, h=0.1, use_bn=False, activation="relu", seed=0):
    block = ResidualBlock(width, h, use_bn=use_bn, activation=activation)
    rng = Rng(seed)
    for layer in (block.affine1, block.affine2):
        layer.W[...] = gauss_draw(rng, width, width, 0.0, 1.0 / np.sqrt(width))
        layer.b[...] = gauss_draw(rng, 1, width, 0.0, 0.1)[0]
    return block


class TestAffineLayer:
    def test_forward_backward(self):
        layer = AffineLayer(3, 2)
        layer.W[...] = [[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]]
        layer.b[...] = [0.5, -0.5]
        x = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_allclose(layer.forward(x), [[7.5, -1.5]])
        g = np.array([[1.0, 2.0]])
        np.testing.assert_allclose(layer.backward(g), g @ layer.W)
        np.testing.assert_allclose(layer.grad_W, g.T @ x)
        np.testing.assert_allclose(layer.grad_b, [1.0, 2.0])

    def test_backward_without_forward(self):
        with pytest.raises(ForwardCacheError):
            AffineLayer(2, 2).backward(np.ones((1, 2)))

    def test_input_width_checked(self):
        with pytest.raises(ShapeError):
            AffineLayer(3, 2).forward(np.ones((4, 2)))


class TestResidualBlock:
    def test_zero_step_is_identity(self):
        block = _block(h=0.0)
        x = gauss_draw(Rng(1), 5, 4)
        np.testing.assert_array_equal(block.forward(x, EVAL), x)

    def test_forward_is_euler_step(self):
        block = _block(h=0.3)
        x = gauss_draw(Rng(2), 5, 4)
        y = block_forward(block, x, EVAL)
        np.testing.assert_allclose(y, x + 0.3 * block.branch(x), atol=1e-15)

    def test_linear_backward(self):
        """With the identity activation dL/dx = g (I + h W2 W1)."""
        block = _block(h=0.25, activation="identity")
        x = gauss_draw(Rng(3), 6, 4)
        block.forward(x, EVAL)
        g = gauss_draw(Rng(4), 6, 4)
        expected = g + 0.25 * g @ block.affine2.W @ block.affine1.W
        np.testing.assert_allclose(block.backward(g), expected, atol=1e-14)

    def test_branch_jacobians_match_finite_differences(self):
        block = _block(use_bn=True, seed=5)
        block.bn1.running_mean[...] = [0.1, -0.2, 0.0, 0.3]
        block.bn1.running_var[...] = [0.5, 2.0, 1.0, 1.5]
        x = gauss_draw(Rng(6), 3, 4)
        jac = block.branch_jacobians(x)
        delta = 1e-7
        for s in range(3):
            for k in range(4):
                plus, minus = x.copy(), x.copy()
                plus[s, k] += delta
                minus[s, k] -= delta
                column = (block.branch(plus)[s] - block.branch(minus)[s]) / (2 * delta)
                np.testing.assert_allclose(jac[s][:, k], column, atol=1e-6)

    def test_update_is_linear_in_h(self):
        """Same weights: doubling h doubles y - x."""
        x = gauss_draw(Rng(2), 5, 4)
        y1 = block_forward(_block(h=0.1), x, EVAL)
        y2 = block_forward(_block(h=0.2), x, EVAL)
        np.testing.assert_allclose(y2 - x, 2.0 * (y1 - x), atol=1e-14)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            _block().forward(np.ones((2, 5)), EVAL)

    def test_backward_without_forward(self):
        with pytest.raises(ForwardCacheError):
            _block().backward(np.ones((2, 4)))

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            ResidualBlock(4, -0.1)


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        bn = BatchNormState(3)
        x = gauss_draw(Rng(0), 64, 3, 2.0, 3.0)
        y = bn_forward(bn, x, TRAIN)
        np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-3)

    def test_running_statistics(self):
        bn = BatchNormState(2, momentum=0.1)
        x = np.array([[1.0, 2.0], [3.0, 6.0]])
        bn.forward(x, TRAIN)
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=0))

    def test_eval_mode_uses_running_statistics(self):
        bn = BatchNormState(2)
        bn.running_mean[...] = [1.0, -1.0]
        bn.running_var[...] = [4.0, 1.0]
        y = bn.forward(np.array([[3.0, 0.0]]), EVAL)
        np.testing.assert_allclose(y, [[2.0 / np.sqrt(4.0 + bn.eps), 1.0 / np.sqrt(1.0 + bn.eps)]])

    def test_constant_column_returns_beta(self):
        bn = BatchNormState(2)
        bn.beta[...] = [0.7, -0.2]
        x = np.full((8, 2), 2.0)
        np.testing.assert_array_equal(bn.forward(x, TRAIN), np.tile([0.7, -0.2], (8, 1)))

    def test_eval_mode_repeats_exactly(self):
        bn = BatchNormState(3)
        bn.forward(gauss_draw(Rng(1), 16, 3, 1.0, 2.0), TRAIN)
        x = gauss_draw(Rng(2), 5, 3)
        np.testing.assert_array_equal(bn.forward(x, EVAL), bn.forward(x, EVAL))

    def test_train_batch_of_one_rejected(self):
        with pytest.raises(BatchSizeError):
            BatchNormState(2).forward(np.ones((1, 2)), TRAIN)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            BatchNormState(2).forward(np.ones((2, 2)), "test")


class TestNetwork:
    def test_telescoping_identity(self, make_net, moons):
        """x_N - x_0 == h * sum_{i<N} F(x_i) up to round-off, N in {1, D/2, D}."""
        for seed in range(5):
            net = make_net(depth=10, h=0.3, seed=seed)
            network_forward(net, moons.features, EVAL)
            states = net.trunk_states
            branches = [block.branch(x) for block, x in zip(net.blocks, states)]
            for n in (1, 5, 10):
                residual = states[n] - states[0] - net.h * np.sum(branches[:n], axis=0)
                assert np.linalg.norm(residual) < 1e-10

    def test_boundary_gradients(self, make_net, batch):
        net = make_net(depth=4)
        logits = net.forward(batch[0], EVAL)
        input_grad = network_backward(net, np.ones_like(logits))
        assert len(net.boundary_grads) == 5
        assert input_grad.shape == batch[0].shape

    def test_two_blocks_match_manual_composition(self, make_net, batch):
        net = make_net(depth=2, h=0.3)
        x = batch[0] @ net.input_embed.W.T + net.input_embed.b
        for block in net.blocks:
            x = x + 0.3 * block.branch(x)
        expected = x @ net.head.W.T + net.head.b
        np.testing.assert_allclose(network_forward(net, batch[0], EVAL), expected, atol=1e-13)

    def test_empty_trunk(self, make_net, batch):
        net = make_net(depth=0)
        logits = network_forward(net, batch[0], EVAL)
        assert len(net.trunk_states) == 1
        x0 = batch[0] @ net.input_embed.W.T + net.input_embed.b
        np.testing.assert_allclose(logits, x0 @ net.head.W.T + net.head.b, atol=1e-14)

    def test_largest_step_scales_with_h(self, make_net, moons):
        """max_n ||x_{n+1} - x_n|| is proportional to h for small h."""
        net = make_net(depth=10)
        largest = []
        for h in (0.001, 0.002):
            other = net.with_h(h)
            network_forward(other, moons.features, EVAL)
            states = other.trunk_states
            largest.append(max(np.linalg.norm(b - a, axis=1).max() for a, b in zip(states, states[1:])))
        assert largest[1] / largest[0] == pytest.approx(2.0, rel=0.05)

    def test_backward_before_forward(self, make_net):
        with pytest.raises(ForwardCacheError):
            make_net().backward(np.ones((2, 2)))

    def test_input_dim_checked(self, make_net):
        with pytest.raises(ShapeError):
            make_net().forward(np.ones((3, 5)))

    def test_same_seed_same_weights(self, make_net):
        a, b, c = make_net(seed=4), make_net(seed=4), make_net(seed=5)
        for (na, va, _), (nb, vb, _), (_, vc, _) in zip(a.named_parameters(), b.named_parameters(),
                                                       c.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(va, vb)
        assert not np.array_equal(a.blocks[0].affine1.W, c.blocks[0].affine1.W)

    def test_parameter_names(self, make_net):
        names = [n for n, _, _ in make_net(depth=2, use_bn=True).named_parameters()]
        assert names[:2] == ["embed.W", "embed.b"]
        assert "blocks.1.bn1.gamma" in names
        assert names[-2:] == ["head.W", "head.b"]

    def test_zero_residual_init(self, make_net, moons):
        net = make_net(depth=6, init_rule="zero_residual")
        net.forward(moons.features, EVAL)
        for x in net.trunk_states[1:]:
            np.testing.assert_array_equal(x, net.trunk_states[0])

    def test_identity_embed(self, make_net, moons):
        net = make_net(width=2, identity_embed=True)
        net.forward(moons.features, EVAL)
        np.testing.assert_array_equal(net.trunk_states[0], moons.features)
        assert not any(n.startswith("embed") for n, _, _ in net.named_parameters())

    def test_with_h_shares_weights(self, make_net, moons):
        net = make_net(h=0.1)
        other = net.with_h(1.0)
        assert other.h == 1.0 and net.h == 0.1
        np.testing.assert_array_equal(other.blocks[2].affine2.W, net.blocks[2].affine2.W)
        assert not np.allclose(other.forward(moons.features, EVAL), net.forward(moons.features, EVAL))

    def test_buffers_restore(self, make_net, batch):
        net = make_net(use_bn=True)
        saved = net.snapshot_buffers()
        net.forward(batch[0], TRAIN)
        assert not np.array_equal(net.blocks[0].bn1.running_mean, saved[0][0])
        net.restore_buffers(saved)
        np.testing.assert_array_equal(net.blocks[0].bn1.running_mean, saved[0][0])


class TestNetworkConfig:
    def test_step_factor_positive(self):
        with pytest.raises(ValidationError):
            NetworkConfig(h=0.0)

    def test_identity_embed_needs_matching_width(self):
        with pytest.raises(ValidationError):
            NetworkConfig(identity_embed=True, width=16, input_dim=2)

    def test_unknown_activation(self):
        with pytest.raises(ValidationError):
            NetworkConfig(activation="tanh")


class TestParameterFile:
    def test_round_trip(self, make_net, batch, tmp_path):
        net = make_net(depth=3, use_bn=True, seed=9)
        net.forward(batch[0], TRAIN)    # non-trivial running statistics
        path = save_params(net, tmp_path / "params.bin")
        loaded = load_params(path, expected_config=net.config)
        np.testing.assert_array_equal(loaded.forward(batch[0], EVAL), net.forward(batch[0], EVAL))
        assert encode(loaded) == encode(net)

    def test_corruption_detected(self, make_net):
        blob = bytearray(encode(make_net()))
        blob[120] ^= 0xFF
        with pytest.raises(ConfigError, match="hash"):
            decode(bytes(blob))

    def test_truncation_detected(self, make_net):
        with pytest.raises(ConfigError):
            decode(encode(make_net())[:50])

    def test_config_mismatch(self, make_net):
        net = make_net(depth=3)
        with pytest.raises(ConfigError, match="does not match"):
            decode(encode(net), expected_config=net.config.model_copy(update={"depth": 4}))

    def test_header_layout(self, make_net):
        net = make_net(depth=2)
        blob = encode(net)
        assert blob[:4] == b"EURN"
        assert len(blob) == 104 + 8 * net.parameter_count() + 32
