"""
Experiment pipelines behind the CLI subcommands.

Every pipeline takes an ExperimentConfig and writes into cfg.run_dir()
(out_dir / "<kind>-<config hash>"). Sweeps fan single training runs out to
worker threads; each run is a `train` config of its own with its own run
directory under <sweep dir>/runs. Aggregates are computed from the records
read back from disk in sorted directory order, so they do not depend on
which worker finished first.

    euler        trajectory_h<h>.csv per step factor + summary.csv
    train        record.csv, record.meta, params.bin, config.ini [, snapshots.csv]
    gridsearch   runs/* + aggregate.csv
    noise-sweep  runs/* + aggregate.csv
    diagnose     <net>/gradient_profile.csv, <net>/noise_<eps>.csv,
                 <net>/snapshots.csv, <net>/bounds.txt + bounds.csv
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from config import TRAIN_NOISE_SEED_OFFSET, sweep_threads
from dataset.moons import add_gaussian_noise, generate_two_moons, split
from diagnostics import (
    branch_deviation_certificate, gradient_growth_check, gradient_profile,
    jacobian_certificate, layerwise_noise_check, noise_growth_check, noise_profile,
    trajectory_export,
)
from errors import ConfigError, InvariantViolation, NonFiniteStateError
from euler.ivp import decay_problem, euler_solve, growth_factor, is_stable, max_abs_error, step_count
from expconfig import ExperimentConfig, save_config
from nn.layers import build_network
from nn.params import load_params, save_params
from records import (
    load_run_record, read_metadata, save_gradient_profile, save_noise_profile, save_reports,
    save_run_record, save_snapshots, save_trajectory, write_csv,
)
from tensor.core import Rng
from training import SgdMomentum, train

log = logging.getLogger(__name__)


def _prepare_run_dir(cfg):
    run_dir = cfg.run_dir()
    os.makedirs(run_dir, exist_ok=True)
    save_config(cfg, os.path.join(run_dir, "config.ini"))
    return run_dir


# ── Data ─────────────────────────────────────────────────────

def build_datasets(data):
    """(train, test) from a DataConfig; train_noise perturbs the training split only."""
    full = generate_two_moons(data)
    train_set, test_set = split(full, data.train_fraction, data.seed)
    if data.train_noise > 0:
        train_set = add_gaussian_noise(train_set, data.train_noise, data.seed + TRAIN_NOISE_SEED_OFFSET)
    return train_set, test_set


# ── euler ────────────────────────────────────────────────────

SUMMARY_FIELDS = ["h", "steps", "max_abs_error", "growth_factor", "stable", "status"]


def run_euler(cfg):
    e = cfg.euler
    problem = decay_problem(lam=e.lam, x0=e.x0, t_end=e.t_end)
    run_dir = _prepare_run_dir(cfg)
    rows = []
    for h in e.h_list:
        row = {
            "h": h,
            "steps": step_count(e.t_end, h),
            "growth_factor": growth_factor(e.lam, h),
            "stable": is_stable(e.lam, h),
        }
        try:
            traj = euler_solve(problem, h)
        except NonFiniteStateError as err:
            log.warning(f"Euler run with h={h} left the finite range at step {err.step}")
            row.update(max_abs_error=float("inf"), status="non_finite")
        else:
            save_trajectory(traj, os.path.join(run_dir, f"trajectory_h{h!r}.csv"))
            row.update(max_abs_error=max_abs_error(traj, problem), status="ok")
        log.info(f"h={h}: max error {row['max_abs_error']:.6g} ({row['status']})")
        rows.append(row)
    write_csv(os.path.join(run_dir, "summary.csv"), SUMMARY_FIELDS, rows)
    return run_dir


# ── train ────────────────────────────────────────────────────

def _snapshot_blocks(cfg):
    blocks = sorted(set(cfg.diagnose.snapshot_blocks) | {cfg.network.depth})
    for n in blocks:
        if n > cfg.network.depth:
            raise ConfigError(f"snapshot block {n} outside [0, {cfg.network.depth}]")
    return blocks


def run_train(cfg):
    """One training run. Divergence is recorded in the RunRecord, not raised."""
    blocks = _snapshot_blocks(cfg) if cfg.train.record_trajectories else []
    train_set, test_set = build_datasets(cfg.data)
    net = build_network(cfg.network)
    opt = SgdMomentum(net, cfg.optimizer.learning_rate, cfg.optimizer.momentum)
    run_dir = _prepare_run_dir(cfg)

    metadata = {"hash": cfg.content_hash(), "config": cfg.model_dump()}
    record = train(net, train_set, test_set, opt, cfg.train, metadata)

    save_run_record(record, run_dir)
    save_params(net, os.path.join(run_dir, "params.bin"))
    if blocks:
        save_snapshots(trajectory_export(net, test_set, blocks), os.path.join(run_dir, "snapshots.csv"))
    return run_dir


# ── Sweeps ───────────────────────────────────────────────────

def _child_config(cfg, parent_dir, seed, h, depth, use_bn, train_noise):
    data = cfg.model_dump()
    data["kind"] = "train"
    data["out_dir"] = os.path.join(parent_dir, "runs")
    data["network"].update(seed=seed, h=h, depth=depth, use_bn=use_bn)
    data["train"]["seed"] = seed
    data["data"]["train_noise"] = train_noise
    return ExperimentConfig(**data)


def _run_all(children):
    """Train every child config; any crash other than divergence propagates."""
    workers = min(sweep_threads(), len(children))
    log.info(f"Sweep: {len(children)} runs on {workers} worker(s)")
    if workers <= 1:
        return [run_train(c) for c in children]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_train, children))


def _read_records(runs_dir):
    """(metadata, RunRecord) for every run directory, in sorted name order."""
    out = []
    for name in sorted(os.listdir(runs_dir)):
        run_dir = os.path.join(runs_dir, name)
        if not os.path.isfile(os.path.join(run_dir, "record.csv")):
            continue
        out.append((read_metadata(os.path.join(run_dir, "record.meta")), load_run_record(run_dir)))
    return out


def _run_key(meta):
    return (
        int(meta["config.network.depth"]),
        float(meta["config.network.h"]),
        meta["config.network.use_bn"] == "true",
        float(meta["config.data.train_noise"]),
    )


def _stats(values):
    """(median, population std); the median of an even count is the mean of the middle two."""
    arr = np.asarray(values, dtype=np.float64)
    return float(np.median(arr)), float(np.std(arr))


def _group(records, wanted, hashes):
    groups = {key: [] for key in wanted}
    for meta, record in records:
        if meta.get("hash") not in hashes:
            continue
        key = _run_key(meta)
        if key in groups:
            groups[key].append(record)
    return groups


GRID_FIELDS = [
    "depth", "h", "use_bn", "train_noise", "runs",
    "median_final_test_acc", "std_final_test_acc",
    "median_best_test_acc", "std_best_test_acc", "diverged",
]


def run_gridsearch(cfg):
    """Train depth x h x BN x seed networks and aggregate test accuracy per (depth, h, BN)."""
    run_dir = _prepare_run_dir(cfg)
    s, noise = cfg.sweep, cfg.data.train_noise
    keys = [(d, h, bn, noise) for d in s.depths for h in s.h_list for bn in s.bn_options]
    children = [
        _child_config(cfg, run_dir, seed, h, d, bn, noise)
        for d, h, bn, _ in keys for seed in s.seeds
    ]
    _run_all(children)

    groups = _group(_read_records(os.path.join(run_dir, "runs")), keys,
                    {c.content_hash() for c in children})
    rows = []
    for key in keys:
        recs = groups[key]
        final_med, final_std = _stats([r.final_test_acc for r in recs])
        best_med, best_std = _stats([r.best_test_acc for r in recs])
        d, h, bn, _ = key
        rows.append({
            "depth": d, "h": h, "use_bn": bn, "train_noise": noise, "runs": len(recs),
            "median_final_test_acc": final_med, "std_final_test_acc": final_std,
            "median_best_test_acc": best_med, "std_best_test_acc": best_std,
            "diverged": sum(r.diverged for r in recs),
        })
        log.info(f"D={d} h={h} bn={bn}: median final acc {final_med:.3f} (std {final_std:.3f})")
    write_csv(os.path.join(run_dir, "aggregate.csv"), GRID_FIELDS, rows)
    return run_dir


NOISE_FIELDS = [
    "noise_level", "h", "runs",
    "median_best_clean_acc", "std_best_clean_acc",
    "median_final_clean_acc", "std_final_clean_acc", "diverged",
]


def run_noise_sweep(cfg):
    """Train on noisy training data, test on clean data, for every noise level x h x seed."""
    run_dir = _prepare_run_dir(cfg)
    s, net = cfg.sweep, cfg.network
    keys = [(net.depth, h, net.use_bn, level) for level in s.noise_levels for h in s.h_list]
    children = [
        _child_config(cfg, run_dir, seed, h, d, bn, level)
        for d, h, bn, level in keys for seed in s.seeds
    ]
    _run_all(children)

    groups = _group(_read_records(os.path.join(run_dir, "runs")), keys,
                    {c.content_hash() for c in children})
    rows = []
    for key in keys:
        recs = groups[key]
        best_med, best_std = _stats([r.best_test_acc for r in recs])
        final_med, final_std = _stats([r.final_test_acc for r in recs])
        _, h, _, level = key
        rows.append({
            "noise_level": level, "h": h, "runs": len(recs),
            "median_best_clean_acc": best_med, "std_best_clean_acc": best_std,
            "median_final_clean_acc": final_med, "std_final_clean_acc": final_std,
            "diverged": sum(r.diverged for r in recs),
        })
        log.info(f"noise={level} h={h}: median best clean acc {best_med:.3f}")
    write_csv(os.path.join(run_dir, "aggregate.csv"), NOISE_FIELDS, rows)
    return run_dir


# ── diagnose ─────────────────────────────────────────────────

BOUND_FIELDS = ["net", "check", "bound", "measured", "holds", "slack", "degenerate", "in_domain"]


def _networks(cfg):
    """(label, network) pairs: a loaded parameter file, or one fresh net per sweep seed."""
    d = cfg.diagnose
    if d.params_file:
        nets = [("loaded", load_params(d.params_file, expected_config=cfg.network))]
    else:
        nets = [
            (f"seed-{seed}", build_network(cfg.network.model_copy(update={"seed": seed})))
            for seed in cfg.sweep.seeds
        ]
    if d.zero_branches:
        for _, net in nets:
            net.zero_residual_branches()
    return nets


def row_scaled_perturbation(rng, rows, cols, norm):
    """Gaussian directions, every row rescaled to Euclidean length `norm`."""
    direction = rng.normal(rows * cols).reshape(rows, cols)
    return norm * direction / np.linalg.norm(direction, axis=1, keepdims=True)


def diagnose_network(net, features, labels, perturbation_norms, rng):
    """All bound reports for one network: (reports, gradient profile, noise profiles)."""
    cert = jacobian_certificate(net, features)
    reports = [("gradient growth", gradient_growth_check(net, features, labels, cert))]
    profile = gradient_profile(net, features, labels)
    noise = []
    for k, eps0 in enumerate(perturbation_norms):
        perturbation = row_scaled_perturbation(rng.spawn(k), features.shape[0], net.config.width, eps0)
        noisy = noise_profile(net, features, perturbation)
        deviation = branch_deviation_certificate(noisy)
        reports.append((f"noise growth eps0={eps0!r}", noise_growth_check(noisy, deviation, net.h, net.depth)))
        reports.append((f"layerwise noise eps0={eps0!r}", layerwise_noise_check(noisy)))
        noise.append((eps0, noisy))
    return reports, profile, noise


def _is_violation(report):
    return not report.holds and not report.degenerate and report.in_domain


def run_diagnose(cfg):
    """Gradient and noise profiles plus bound reports; raises InvariantViolation if a bound fails."""
    d = cfg.diagnose
    for n in d.snapshot_blocks:
        if n > cfg.network.depth:
            raise ConfigError(f"snapshot block {n} outside [0, {cfg.network.depth}]")
    nets = _networks(cfg)
    _, test_set = build_datasets(cfg.data)
    batch = test_set.subset(np.arange(min(d.batch_size, len(test_set))))
    run_dir = _prepare_run_dir(cfg)

    rows, violations = [], []
    for label, net in nets:
        net_dir = os.path.join(run_dir, label)
        reports, profile, noise = diagnose_network(
            net, batch.features, batch.labels, d.perturbation_norms, Rng(net.config.seed)
        )
        save_gradient_profile(profile, os.path.join(net_dir, "gradient_profile.csv"))
        for eps0, noisy in noise:
            save_noise_profile(noisy, os.path.join(net_dir, f"noise_{eps0!r}.csv"))
        if d.snapshot_blocks:
            save_snapshots(trajectory_export(net, test_set, d.snapshot_blocks),
                           os.path.join(net_dir, "snapshots.csv"))
        save_reports(reports, os.path.join(net_dir, "bounds.txt"))

        for title, report in reports:
            rows.append({
                "net": label, "check": title, "bound": report.bound, "measured": report.measured,
                "holds": report.holds, "slack": report.slack,
                "degenerate": report.degenerate, "in_domain": report.in_domain,
            })
            if _is_violation(report):
                violations.append(f"{label}: {title}")

    write_csv(os.path.join(run_dir, "bounds.csv"), BOUND_FIELDS, rows)
    held = sum(r["holds"] for r in rows)
    log.info(f"Bound checks: {held}/{len(rows)} hold over {len(nets)} network(s)")
    if violations:
        raise InvariantViolation(f"bound checks failed: {', '.join(violations)}")
    return run_dir


RUNNERS = {
    "euler": run_euler,
    "train": run_train,
    "gridsearch": run_gridsearch,
    "noise-sweep": run_noise_sweep,
    "diagnose": run_diagnose,
}


def run_experiment(cfg):
    return RUNNERS[cfg.kind](cfg)
