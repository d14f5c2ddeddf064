"""
Result files: CSV tables and key=value sidecars.

CSV dialect: comma separator, header row, LF line endings, floats with 17
significant digits. Nothing written here carries a timestamp, so reruns
produce identical bytes.
"""
import csv
import logging
import os

import numpy as np

from config import CSV_LINE_END, FLOAT_FORMAT
from training import EpochRow, RunRecord

log = logging.getLogger(__name__)

RUN_FIELDS = ["epoch", "train_loss", "train_acc", "test_acc", "max_block_grad_norm", "input_grad_norm"]


def fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), FLOAT_FORMAT)
    if value is None:
        return ""
    return str(value)


def write_csv(filepath, fieldnames, rows):
    os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)
    with open(filepath, "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, lineterminator=CSV_LINE_END)
        w.writeheader()
        for row in rows:
            w.writerow({k: fmt(row[k]) for k in fieldnames})
    log.debug(f"Wrote {len(rows)} rows to {filepath}")
    return filepath


def read_csv(filepath):
    with open(filepath, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


# ── Sidecar metadata ─────────────────────────────────────────

def _flatten(data, prefix=""):
    out = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, f"{name}."))
        elif isinstance(value, (list, tuple)):
            out[name] = ", ".join(fmt(v) for v in value)
        else:
            out[name] = fmt(value)
    return out


def write_metadata(filepath, metadata):
    """One `key = value` line per (flattened, dotted) key, sorted."""
    flat = _flatten(metadata)
    os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)
    with open(filepath, "w", encoding="utf-8", newline="") as f:
        for key in sorted(flat):
            f.write(f"{key} = {flat[key]}{CSV_LINE_END}")
    return filepath


def read_metadata(filepath):
    meta = {}
    with open(filepath, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta


# ── Run records ──────────────────────────────────────────────

def save_run_record(record, run_dir):
    """record.csv + record.meta in `run_dir`; returns the CSV path."""
    csv_path = os.path.join(run_dir, "record.csv")
    rows = [{k: getattr(r, k) for k in RUN_FIELDS} for r in record.rows]
    write_csv(csv_path, RUN_FIELDS, rows)
    meta = dict(record.metadata)
    meta["run"] = {
        "diverged": record.diverged,
        "diverged_epoch": record.diverged_epoch,
        "final_test_acc": record.final_test_acc,
        "best_test_acc": record.best_test_acc,
    }
    write_metadata(os.path.join(run_dir, "record.meta"), meta)
    return csv_path


def load_run_record(run_dir):
    rows = [
        EpochRow(
            epoch=int(r["epoch"]),
            train_loss=float(r["train_loss"]),
            train_acc=float(r["train_acc"]),
            test_acc=float(r["test_acc"]),
            max_block_grad_norm=float(r["max_block_grad_norm"]),
            input_grad_norm=float(r["input_grad_norm"]),
        )
        for r in read_csv(os.path.join(run_dir, "record.csv"))
    ]
    meta = read_metadata(os.path.join(run_dir, "record.meta"))
    diverged_epoch = meta.get("run.diverged_epoch", "")
    return RunRecord(
        rows=rows,
        metadata=meta,
        diverged=meta.get("run.diverged") == "true",
        diverged_epoch=int(diverged_epoch) if diverged_epoch else None,
    )


# ── Diagnostics tables ───────────────────────────────────────

def save_trajectory(traj, filepath):
    """Columns t, x_0 .. x_{d-1}."""
    dim = traj.states.shape[1]
    names = ["t"] + [f"x_{j}" for j in range(dim)]
    rows = [dict(zip(names, [t, *x])) for t, x in zip(traj.times, traj.states)]
    return write_csv(filepath, names, rows)


def save_gradient_profile(profile, filepath):
    rows = [{"block": n, "grad_norm": v} for n, v in enumerate(profile.norms)]
    return write_csv(filepath, ["block", "grad_norm"], rows)


def save_noise_profile(profile, filepath):
    """branch_delta at row n is ||F(x_n^eps) - F(x_n)||; empty on the last row."""
    rows = []
    for n, eps in enumerate(profile.epsilon):
        delta = profile.branch_delta[n] if n < profile.depth else None
        rows.append({"block": n, "epsilon": eps, "branch_delta": delta})
    return write_csv(filepath, ["block", "epsilon", "branch_delta"], rows)


def save_snapshots(snapshots, filepath):
    """Columns block, x0 .. x{w-1}, label; one row per sample per block."""
    width = snapshots[0].features.shape[1] if snapshots else 0
    names = ["block"] + [f"x{j}" for j in range(width)] + ["label"]
    rows = []
    for snap in snapshots:
        for x, label in zip(snap.features, snap.labels):
            rows.append(dict(zip(names, [snap.block, *x, int(label)])))
    return write_csv(filepath, names, rows)


def save_reports(reports, filepath):
    """Plain-text bound reports, one block per report."""
    os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)
    with open(filepath, "w", encoding="utf-8", newline="") as f:
        for title, report in reports:
            f.write(f"# {title}{CSV_LINE_END}")
            for line in report.lines():
                f.write(line + CSV_LINE_END)
            f.write(CSV_LINE_END)
    return filepath
