"""
Diagnostics: measure the quantities that govern robustness in h.

* gradient profiles  ||dL/dx_n||  across block boundaries (backward growth)
* Lipschitz certificates for the residual branches
* the backward bound   ||dL/dx_0|| <= ||dL/dx_D|| (1 - h + h (1 + W)^D)
* noise profiles  eps_n = ||x_n^eps - x_n||  and the forward bounds
      eps_N <= eps_0 + h * sum_{i<N} ||F(x_i^eps) - F(x_i)||,
      eps_D <= eps_0 + h D W
* per-block feature snapshots and a finite-difference gradient oracle

Bounds are stated along a single propagation path, so they are checked per
sample and reported for the worst sample in the batch. Checks run with BN
disabled or in eval mode, where samples do not interact.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from config import (
    BOUND_TOLERANCE, EXACT_JACOBIAN_MAX_WIDTH, FD_DELTA, FD_MIN_GRAD_FRACTION,
    FD_SAMPLES, POWER_ITERS, POWER_SAFETY_FACTOR,
)
from errors import ConfigError, ShapeError
from nn.layers import EVAL, TRAIN
from tensor.core import Rng, as_matrix, frobenius_norm, operator_norm_estimate
from training import softmax_cross_entropy

log = logging.getLogger(__name__)


# ── Gradient profile ─────────────────────────────────────────

@dataclass
class GradientProfile:
    norms: np.ndarray            # (D+1,) Frobenius norm of dL/dx_n over the batch
    per_sample: np.ndarray       # (D+1, batch) Euclidean norm per sample
    loss: float
    exploded: bool = False
    first_nonfinite: Optional[int] = None

    @property
    def top(self):
        """||dL/dx_D||."""
        return float(self.norms[-1])

    @property
    def peak(self):
        return float(np.max(self.norms))


def gradient_profile(net, batch, labels, mode=EVAL):
    """One forward + one backward; records ||dL/dx_n|| at every block boundary."""
    net.zero_grad()
    with np.errstate(over="ignore", invalid="ignore"):
        logits = net.forward(batch, mode)
        loss, grad = softmax_cross_entropy(logits, labels)
        net.backward(grad)
        grads = np.stack(net.boundary_grads)
        per_sample = np.linalg.norm(grads, axis=2)
        norms = np.sqrt(np.sum(per_sample ** 2, axis=1))
    profile = GradientProfile(norms=norms, per_sample=per_sample, loss=loss)
    bad = np.flatnonzero(~np.isfinite(norms))
    if bad.size:
        profile.exploded = True
        profile.first_nonfinite = int(bad[0])
        log.warning(f"Gradient profile exploded at boundary {profile.first_nonfinite} (h={net.h})")
    return profile


# ── Certificates ─────────────────────────────────────────────

@dataclass
class LipschitzCertificate:
    per_block: np.ndarray                 # (D,) w_i
    per_sample: Optional[np.ndarray] = None   # (D, batch) values the w_i maximize over
    method: str = "exact"

    @property
    def W(self):
        return float(np.max(self.per_block)) if self.per_block.size else 0.0


def jacobian_certificate(net, batch):
    """
    Bound the operator norm of dF_i/dx_i at every evaluated point (eval mode).
    Exact SVD up to EXACT_JACOBIAN_MAX_WIDTH, otherwise power iteration
    inflated by POWER_SAFETY_FACTOR.
    """
    net.forward(batch, EVAL)
    states = net.trunk_states
    exact = net.config.width <= EXACT_JACOBIAN_MAX_WIDTH
    rows = []
    for block, x in zip(net.blocks, states[:-1]):
        jac = block.branch_jacobians(x)
        if exact:
            rows.append(np.linalg.norm(jac, ord=2, axis=(1, 2)))
        else:
            rows.append(np.array([
                POWER_SAFETY_FACTOR * operator_norm_estimate(j, POWER_ITERS) for j in jac
            ]))
    if not rows:
        per_sample = np.zeros((0, states[0].shape[0]))
    else:
        per_sample = np.stack(rows)
    per_block = per_sample.max(axis=1) if net.depth else np.zeros(0)
    return LipschitzCertificate(
        per_block=per_block, per_sample=per_sample, method="exact" if exact else "power"
    )


# ── Backward bound ───────────────────────────────────────────

def gradient_growth_bound(h, depth, W):
    return 1.0 - h + h * (1.0 + W) ** depth


@dataclass
class BoundReport:
    name: str
    measured: float
    bound: float
    holds: bool
    slack: float
    degenerate: bool = False
    in_domain: bool = True
    worst_sample: Optional[int] = None

    def lines(self):
        return [
            f"[{self.name}]",
            f"bound = {self.bound!r}",
            f"measured = {self.measured!r}",
            f"holds = {'yes' if self.holds else 'no'}",
            f"slack = {self.slack!r}",
            f"degenerate = {'yes' if self.degenerate else 'no'}",
            f"in_domain = {'yes' if self.in_domain else 'no'}",
        ]


def gradient_growth_check(net, batch, labels, cert, tol=BOUND_TOLERANCE):
    """
    Worst per-sample ratio ||dL/dx_0|| / ||dL/dx_D|| against 1 - h + h (1 + W)^D.
    The bound follows from (1 + hW)^D lying under its chord on 0 <= h <= 1;
    for h > 1 the report is marked out of domain.
    """
    if net.config.use_bn:
        log.debug("Backward bound check uses eval-mode batch norm")
    profile = gradient_profile(net, batch, labels, EVAL)
    h, depth = net.h, net.depth
    bound = gradient_growth_bound(h, depth, cert.W)
    top = profile.per_sample[-1]
    usable = top > 0
    if profile.exploded or not np.any(usable):
        log.warning("Backward bound check is degenerate (zero or non-finite top gradient)")
        return BoundReport("gradient_growth", float("nan"), bound, False, float("nan"),
                           degenerate=True, in_domain=h <= 1.0)
    ratios = np.full(top.shape, -np.inf)
    ratios[usable] = profile.per_sample[0][usable] / top[usable]
    worst = int(np.argmax(ratios))
    measured = float(ratios[worst])
    holds = measured <= bound + tol
    if not holds:
        log.warning(f"Backward bound violated: ratio {measured} > bound {bound} (h={h}, D={depth})")
    return BoundReport("gradient_growth", measured, bound, holds, bound - measured,
                       in_domain=h <= 1.0, worst_sample=worst)


# ── Noise profile ────────────────────────────────────────────

@dataclass
class NoiseProfile:
    epsilon: np.ndarray          # (D+1,) batch Frobenius norm of x_n^eps - x_n
    per_sample: np.ndarray       # (D+1, batch)
    branch_delta: np.ndarray     # (D,) batch Frobenius norm of F(x_i^eps) - F(x_i)
    branch_per_sample: np.ndarray  # (D, batch)
    h: float
    perturbation_norm: float

    @property
    def depth(self):
        return len(self.branch_delta)

    @property
    def epsilon0(self):
        return float(self.epsilon[0])

    @property
    def amplification(self):
        """Cumulative term h * sum_i ||F(x_i^eps) - F(x_i)|| (batch norms)."""
        return float(self.h * np.sum(self.branch_delta))

    def layerwise_terms(self):
        """(rhs, slack), both (D, batch): rhs = eps_0 + h sum_{i<N} delta_i and rhs - eps_N for N = 1..D."""
        cumulative = np.cumsum(self.branch_per_sample, axis=0)
        rhs = self.per_sample[0][None, :] + self.h * cumulative
        return rhs, rhs - self.per_sample[1:]

    def layerwise_slack(self):
        """Worst-sample slack per layer."""
        return np.min(self.layerwise_terms()[1], axis=1)

    def layerwise_holds(self, tol=BOUND_TOLERANCE):
        return layerwise_noise_check(self, tol).holds


def _trunk_with_branches(net, x0):
    net.trunk(x0, EVAL)
    return list(net.trunk_states), [b.last_branch.copy() for b in net.blocks]


def noise_profile(net, x, perturbation):
    """
    Two eval-mode passes: clean input and input whose trunk features x_0 are
    shifted by `perturbation` (batch x width). eps_0 is the realized shift.
    """
    x = as_matrix(x, "clean input")
    perturbation = as_matrix(perturbation, "perturbation")
    x0 = net.embed(x)
    if perturbation.shape != x0.shape:
        raise ShapeError("perturbation vs trunk features", perturbation.shape, x0.shape)
    if not np.any(perturbation):
        log.debug("noise profile called with a zero perturbation")

    with np.errstate(over="ignore", invalid="ignore"):
        clean, clean_f = _trunk_with_branches(net, x0)
        noisy, noisy_f = _trunk_with_branches(net, x0 + perturbation)
        diff = np.stack(noisy) - np.stack(clean)
        per_sample = np.linalg.norm(diff, axis=2)
        if net.depth:
            bdiff = np.stack(noisy_f) - np.stack(clean_f)
            branch_per_sample = np.linalg.norm(bdiff, axis=2)
        else:
            branch_per_sample = np.zeros((0, x0.shape[0]))

    return NoiseProfile(
        epsilon=np.sqrt(np.sum(per_sample ** 2, axis=1)),
        per_sample=per_sample,
        branch_delta=np.sqrt(np.sum(branch_per_sample ** 2, axis=1)),
        branch_per_sample=branch_per_sample,
        h=net.h,
        perturbation_norm=frobenius_norm(perturbation),
    )


def branch_deviation_certificate(profile):
    """W = max_i ||F(x_i^eps) - F(x_i)|| over blocks and samples."""
    per_sample = profile.branch_per_sample
    per_block = per_sample.max(axis=1) if per_sample.size else np.zeros(per_sample.shape[0])
    return LipschitzCertificate(per_block=per_block, per_sample=per_sample, method="deviation")


def noise_growth_bound(epsilon0, h, depth, W):
    return epsilon0 + h * depth * W


def noise_growth_check(profile, cert, h, depth, tol=BOUND_TOLERANCE):
    """eps_D <= eps_0 + h D W, per sample; reports the sample with least slack."""
    eps0 = profile.per_sample[0]
    epsD = profile.per_sample[-1]
    bounds = noise_growth_bound(eps0, h, depth, cert.W)
    slack = bounds - epsD
    worst = int(np.argmin(slack))
    holds = bool(slack[worst] >= -tol)
    if not holds:
        log.warning(f"Forward noise bound violated by {-slack[worst]} (h={h}, D={depth})")
    return BoundReport("noise_growth", float(epsD[worst]), float(bounds[worst]), holds,
                       float(slack[worst]), worst_sample=worst)


def layerwise_noise_check(profile, tol=BOUND_TOLERANCE):
    """eps_N <= eps_0 + h sum_{i<N} ||F(x_i^eps) - F(x_i)|| at every N; reports the tightest (N, sample)."""
    if profile.depth == 0:
        eps0 = profile.epsilon0
        return BoundReport("noise_layerwise", eps0, eps0, True, 0.0)
    rhs, slack = profile.layerwise_terms()
    layer, sample = np.unravel_index(int(np.argmin(slack)), slack.shape)
    worst = float(slack[layer, sample])
    holds = bool(worst >= -tol)
    if not holds:
        log.warning(f"Layerwise noise bound violated by {-worst} at block {layer + 1}")
    return BoundReport("noise_layerwise", float(profile.per_sample[layer + 1, sample]),
                       float(rhs[layer, sample]), holds, worst, worst_sample=int(sample))


# ── Trajectory snapshots ─────────────────────────────────────

@dataclass
class Snapshot:
    block: int
    features: np.ndarray
    labels: np.ndarray


def trajectory_export(net, dataset, block_indices):
    """Eval-mode trunk features x_n of every sample at the requested blocks."""
    for n in block_indices:
        if not 0 <= n <= net.depth:
            raise ConfigError(f"block index {n} outside [0, {net.depth}]")
    with np.errstate(over="ignore", invalid="ignore"):
        net.forward(dataset.features, EVAL)
    states = net.trunk_states
    return [Snapshot(int(n), states[n].copy(), dataset.labels.copy()) for n in block_indices]


def class_centroid_distance(snapshot):
    """Distance between the class-0 and class-1 feature centroids."""
    c0 = snapshot.features[snapshot.labels == 0].mean(axis=0)
    c1 = snapshot.features[snapshot.labels == 1].mean(axis=0)
    return float(np.linalg.norm(c0 - c1))


# ── Finite-difference oracle ─────────────────────────────────

@dataclass
class GradCheck:
    max_rel_error: float
    checked: List[tuple] = field(default_factory=list)   # (name, index, analytic, numeric, rel)
    skipped_kinks: int = 0


def _patterns(net):
    return [None if b.activation_pattern is None else b.activation_pattern.copy() for b in net.blocks]


def _same_patterns(a, b):
    return all(x is None or np.array_equal(x, y) for x, y in zip(a, b))


def finite_difference_oracle(net, batch, labels, samples=FD_SAMPLES, delta=FD_DELTA,
                             mode=TRAIN, seed=0, check_inputs=True,
                             min_grad_fraction=FD_MIN_GRAD_FRACTION):
    """
    Central differences on `samples` randomly drawn scalars (parameters and,
    optionally, input features) against the analytic backward pass.

    Entries whose perturbation flips a ReLU are skipped, as are entries whose
    analytic gradient is below `min_grad_fraction` of the largest one: neither
    can be resolved by a central difference above round-off.
    """
    if delta <= 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    batch = as_matrix(batch, "batch").copy()
    buffers = net.snapshot_buffers()

    def loss_at():
        logits = net.forward(batch, mode)
        loss, _ = softmax_cross_entropy(logits, labels)
        return loss, _patterns(net)

    net.zero_grad()
    logits = net.forward(batch, mode)
    base_patterns = _patterns(net)
    _, grad = softmax_cross_entropy(logits, labels)
    input_grad = net.backward(grad)

    entries = [(name, value, g.copy()) for name, value, g in net.named_parameters()]
    if check_inputs:
        entries.append(("input", batch, input_grad.copy()))

    scale = max(float(np.max(np.abs(g))) for _, _, g in entries)
    candidates = [
        (k, i) for k, (_, _, g) in enumerate(entries)
        for i in np.flatnonzero(np.abs(g.ravel()) >= min_grad_fraction * scale)
    ]
    order = Rng(seed).permutation(len(candidates))

    result = GradCheck(max_rel_error=0.0)
    for c in order:
        if len(result.checked) >= samples:
            break
        k, i = candidates[c]
        name, value, g = entries[k]
        flat = value.reshape(-1)
        original = flat[i]
        flat[i] = original + delta
        plus, p_plus = loss_at()
        flat[i] = original - delta
        minus, p_minus = loss_at()
        flat[i] = original
        if not (_same_patterns(p_plus, base_patterns) and _same_patterns(p_minus, base_patterns)):
            result.skipped_kinks += 1
            continue
        numeric = (plus - minus) / (2.0 * delta)
        analytic = float(g.reshape(-1)[i])
        rel = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-8)
        result.checked.append((name, int(i), analytic, numeric, rel))
        result.max_rel_error = max(result.max_rel_error, rel)

    net.restore_buffers(buffers)
    if len(result.checked) < samples:
        log.warning(f"Gradient check sampled only {len(result.checked)} of {samples} entries")
    log.debug(
        f"Gradient check: {len(result.checked)} entries, max rel error {result.max_rel_error:.3e}, "
        f"{result.skipped_kinks} skipped at kinks"
    )
    return result
