"""
Euler-viewed residual network with a hand-written backward pass.

Block n computes   x_{n+1} = x_n + h * F(x_n)
with the branch    F = affine2 . act . [BN] . affine1
and identity after the addition, so unrolling gives
    x_N = x_n + h * sum_{i=n}^{N-1} F(x_i).

Features are batched as rows (batch x width). Affine weights are stored
(out_dim x in_dim) and applied as x @ W.T + b.
"""
import copy
import logging
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import BN_EPS, BN_MOMENTUM, DEFAULT_DEPTH, DEFAULT_H, DEFAULT_NUM_CLASSES, DEFAULT_WIDTH, INIT_GAIN
from errors import BatchSizeError, ForwardCacheError, ShapeError
from tensor.core import Rng, as_matrix, gauss_draw

log = logging.getLogger(__name__)

TRAIN = "train"
EVAL = "eval"
MODES = (TRAIN, EVAL)


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


class NetworkConfig(BaseModel):
    """Everything needed to rebuild a network bit-for-bit."""
    model_config = ConfigDict(frozen=True)

    depth: int = Field(DEFAULT_DEPTH, ge=0)
    h: float = Field(DEFAULT_H, gt=0)
    width: int = Field(DEFAULT_WIDTH, ge=1)
    use_bn: bool = False
    num_classes: int = Field(DEFAULT_NUM_CLASSES, ge=1)
    input_dim: int = Field(2, ge=1)
    seed: int = 0
    init_rule: Literal["variance_preserving", "zero_residual"] = "variance_preserving"
    init_gain: float = Field(INIT_GAIN, gt=0)
    activation: Literal["relu", "identity"] = "relu"
    identity_embed: bool = False

    @model_validator(mode="after")
    def _embed_dims(self):
        if self.identity_embed and self.input_dim != self.width:
            raise ValueError(
                f"identity_embed needs input_dim == width ({self.input_dim} != {self.width})"
            )
        return self


# ── Affine ────────────────────────────────────────────────────

class AffineLayer:
    def __init__(self, in_dim, out_dim, trainable=True):
        self.W = np.zeros((out_dim, in_dim))
        self.b = np.zeros(out_dim)
        self.grad_W = np.zeros_like(self.W)
        self.grad_b = np.zeros_like(self.b)
        self.trainable = trainable
        self._x = None

    @property
    def in_dim(self):
        return self.W.shape[1]

    @property
    def out_dim(self):
        return self.W.shape[0]

    def forward(self, x):
        if x.shape[1] != self.in_dim:
            raise ShapeError("affine input", x.shape, self.W.shape)
        self._x = x
        return x @ self.W.T + self.b

    def backward(self, g):
        if self._x is None:
            raise ForwardCacheError("affine backward called before forward")
        self.grad_W += g.T @ self._x
        self.grad_b += g.sum(axis=0)
        return g @ self.W

    def zero_grad(self):
        self.grad_W.fill(0.0)
        self.grad_b.fill(0.0)


# ── Batch normalization ──────────────────────────────────────

class BatchNormState:
    """
    Per-feature BN over the batch axis. Train mode normalizes with the
    biased (1/m) batch variance and updates the running statistics as
        running <- (1 - momentum) * running + momentum * batch_stat.
    Eval mode is the fixed affine map gamma * (x - mean) / sqrt(var + eps) + beta.
    """

    def __init__(self, dim, eps=BN_EPS, momentum=BN_MOMENTUM):
        if eps <= 0:
            raise ValueError(f"BN eps must be > 0, got {eps}")
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.grad_gamma = np.zeros(dim)
        self.grad_beta = np.zeros(dim)
        self.eps = eps
        self.momentum = momentum
        self._cache = None

    def scale(self):
        """Eval-mode per-feature slope gamma / sqrt(running_var + eps)."""
        return self.gamma / np.sqrt(self.running_var + self.eps)

    def forward(self, x, mode):
        _check_mode(mode)
        if mode == EVAL:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
            self._cache = (EVAL, xhat, None)
            return self.gamma * xhat + self.beta

        m = x.shape[0]
        if m < 2:
            raise BatchSizeError(f"train-mode batch norm needs batch size >= 2, got {m}")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * mu
        self.running_var = (1.0 - self.momentum) * self.running_var + self.momentum * var
        self._cache = (TRAIN, xhat, inv_std)
        return self.gamma * xhat + self.beta

    def backward(self, g):
        if self._cache is None:
            raise ForwardCacheError("batch norm backward called before forward")
        mode, xhat, inv_std = self._cache
        self.grad_gamma += np.sum(g * xhat, axis=0)
        self.grad_beta += g.sum(axis=0)
        if mode == EVAL:
            return g * self.scale()
        m = g.shape[0]
        gx = g * self.gamma
        return (inv_std / m) * (m * gx - gx.sum(axis=0) - xhat * np.sum(gx * xhat, axis=0))

    def zero_grad(self):
        self.grad_gamma.fill(0.0)
        self.grad_beta.fill(0.0)


# ── Residual block ───────────────────────────────────────────

def _activate(u, activation):
    if activation == "identity":
        return u, None
    mask = u > 0
    return u * mask, mask


class ResidualBlock:
    def __init__(self, width, h, use_bn=False, activation="relu"):
        if h < 0:
            raise ValueError(f"step factor h must be >= 0, got {h}")
        self.h = h
        self.activation = activation
        self.affine1 = AffineLayer(width, width)
        self.affine2 = AffineLayer(width, width)
        self.bn1 = BatchNormState(width) if use_bn else None
        self._mask = None
        self._ready = False
        self.last_branch = None

    @property
    def width(self):
        return self.affine1.in_dim

    @property
    def activation_pattern(self):
        """ReLU on/off mask of the last forward (None for the identity activation)."""
        return self._mask

    def forward(self, x, mode=TRAIN):
        """y = x + h * F(x); caches what backward needs."""
        _check_mode(mode)
        if x.shape[1] != self.width:
            raise ShapeError("residual block input", x.shape, (x.shape[0], self.width))
        u = self.affine1.forward(x)
        if self.bn1 is not None:
            u = self.bn1.forward(u, mode)
        a, self._mask = _activate(u, self.activation)
        f = self.affine2.forward(a)
        self.last_branch = f
        self._ready = True
        return x + self.h * f

    def branch(self, x):
        """F(x) in eval mode without touching any cache."""
        u = x @ self.affine1.W.T + self.affine1.b
        if self.bn1 is not None:
            bn = self.bn1
            u = bn.gamma * ((u - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)) + bn.beta
        a, _ = _activate(u, self.activation)
        return a @ self.affine2.W.T + self.affine2.b

    def branch_jacobians(self, x):
        """Per-sample eval-mode Jacobians dF/dx, shape (batch, width, width)."""
        u = x @ self.affine1.W.T + self.affine1.b
        W1 = self.affine1.W
        if self.bn1 is not None:
            bn = self.bn1
            u = bn.gamma * ((u - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)) + bn.beta
            W1 = bn.scale()[:, None] * W1
        if self.activation == "identity":
            slope = np.ones_like(u)
        else:
            slope = (u > 0).astype(np.float64)
        # J_s = W2 diag(slope_s) W1
        return np.einsum("ij,sj,jk->sik", self.affine2.W, slope, W1)

    def backward(self, g):
        if not self._ready:
            raise ForwardCacheError("residual block backward called before forward")
        ga = self.affine2.backward(self.h * g)
        if self._mask is not None:
            ga = ga * self._mask
        if self.bn1 is not None:
            ga = self.bn1.backward(ga)
        return g + self.affine1.backward(ga)

    def layers(self):
        return [self.affine1, self.bn1, self.affine2]

    def zero_grad(self):
        for layer in self.layers():
            if layer is not None:
                layer.zero_grad()


def block_forward(block, x, mode=TRAIN):
    return block.forward(as_matrix(x), mode)


# ── Network ──────────────────────────────────────────────────

class Network:
    """embed -> D residual blocks sharing h -> affine head."""

    def __init__(self, config):
        self.config = config
        c = config
        self.input_embed = AffineLayer(c.input_dim, c.width, trainable=not c.identity_embed)
        self.blocks = [
            ResidualBlock(c.width, c.h, use_bn=c.use_bn, activation=c.activation)
            for _ in range(c.depth)
        ]
        self.head = AffineLayer(c.width, c.num_classes)
        self.trunk_states = None     # [x_0 .. x_D] from the last forward
        self.boundary_grads = None   # [dL/dx_0 .. dL/dx_D] from the last backward

    @property
    def depth(self):
        return len(self.blocks)

    @property
    def h(self):
        return self.config.h

    # ── forward / backward ──
    def embed(self, x):
        if x.shape[1] != self.config.input_dim:
            raise ShapeError("network input", x.shape, (x.shape[0], self.config.input_dim))
        if self.config.identity_embed:
            return x.copy()
        return self.input_embed.forward(x)

    def trunk(self, x0, mode=TRAIN):
        """Run the blocks from trunk input x_0; records every x_n."""
        states = [x0]
        x = x0
        for block in self.blocks:
            x = block.forward(x, mode)
            states.append(x)
        self.trunk_states = states
        return x

    def forward(self, x, mode=TRAIN):
        _check_mode(mode)
        x = as_matrix(x, "network input")
        return self.head.forward(self.trunk(self.embed(x), mode))

    def backward(self, logit_grad):
        """Fill every parameter gradient; returns dL/d(input features)."""
        if self.trunk_states is None:
            raise ForwardCacheError("network backward called before forward")
        logit_grad = as_matrix(logit_grad, "logit gradient")
        g = self.head.backward(logit_grad)
        grads = [g]
        for block in reversed(self.blocks):
            g = block.backward(g)
            grads.append(g)
        grads.reverse()
        self.boundary_grads = grads
        if self.config.identity_embed:
            return g.copy()
        return self.input_embed.backward(g)

    # ── parameters ──
    def named_parameters(self):
        """(name, value, grad) triples in a fixed order; value/grad are live arrays."""
        out = []

        def affine(prefix, layer):
            out.append((f"{prefix}.W", layer.W, layer.grad_W))
            out.append((f"{prefix}.b", layer.b, layer.grad_b))

        if self.input_embed.trainable:
            affine("embed", self.input_embed)
        for i, block in enumerate(self.blocks):
            affine(f"blocks.{i}.affine1", block.affine1)
            if block.bn1 is not None:
                out.append((f"blocks.{i}.bn1.gamma", block.bn1.gamma, block.bn1.grad_gamma))
                out.append((f"blocks.{i}.bn1.beta", block.bn1.beta, block.bn1.grad_beta))
            affine(f"blocks.{i}.affine2", block.affine2)
        affine("head", self.head)
        return out

    def buffers(self):
        """BN running statistics, in the same block order."""
        out = []
        for i, block in enumerate(self.blocks):
            if block.bn1 is not None:
                out.append((f"blocks.{i}.bn1.running_mean", block.bn1.running_mean))
                out.append((f"blocks.{i}.bn1.running_var", block.bn1.running_var))
        return out

    def snapshot_buffers(self):
        return [(b.running_mean.copy(), b.running_var.copy()) for b in self._bns()]

    def restore_buffers(self, snapshot):
        for bn, (mean, var) in zip(self._bns(), snapshot):
            bn.running_mean = mean.copy()
            bn.running_var = var.copy()

    def _bns(self):
        return [b.bn1 for b in self.blocks if b.bn1 is not None]

    def zero_grad(self):
        self.input_embed.zero_grad()
        self.head.zero_grad()
        for block in self.blocks:
            block.zero_grad()

    def parameter_count(self):
        return sum(v.size for _, v, _ in self.named_parameters())

    # ── variants ──
    def zero_residual_branches(self):
        """Make every F identically zero (affine2 weights and bias = 0)."""
        for block in self.blocks:
            block.affine2.W.fill(0.0)
            block.affine2.b.fill(0.0)

    def with_h(self, h):
        """Deep copy sharing these weights but using step factor h."""
        clone = copy.deepcopy(self)
        clone.config = self.config.model_copy(update={"h": h})
        for block in clone.blocks:
            block.h = h
        clone.trunk_states = None
        clone.boundary_grads = None
        return clone


def network_forward(net, x, mode=TRAIN):
    return net.forward(x, mode)


def network_backward(net, logit_grad):
    return net.backward(logit_grad)


def bn_forward(bn, x, mode=TRAIN):
    return bn.forward(as_matrix(x), mode)


def _init_affine(layer, rng, gain):
    std = gain / np.sqrt(layer.in_dim)
    layer.W[...] = gauss_draw(rng, layer.out_dim, layer.in_dim, 0.0, std)
    layer.b.fill(0.0)


def build_network(config):
    """Initialize a network from its config: W ~ N(0, (g/sqrt(in))^2), b = 0, gamma = 1, beta = 0."""
    net = Network(config)
    rng = Rng(config.seed)
    if config.identity_embed:
        net.input_embed.W[...] = np.eye(config.width)
    else:
        _init_affine(net.input_embed, rng, config.init_gain)
    for block in net.blocks:
        _init_affine(block.affine1, rng, config.init_gain)
        _init_affine(block.affine2, rng, config.init_gain)
    _init_affine(net.head, rng, config.init_gain)
    if config.init_rule == "zero_residual":
        net.zero_residual_branches()
    log.debug(
        f"Built network D={config.depth} h={config.h} width={config.width} "
        f"bn={config.use_bn} ({net.parameter_count()} parameters)"
    )
    return net
