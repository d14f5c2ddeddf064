"""
Central configuration for the Euler ResNet lab.
Edit defaults here instead of hunting through files.
"""
import os

# --- Paths ---
RUNS_DIR = "runs"               # relative to the working directory; part of every run hash

# --- Parallelism ---
THREADS_ENV = "EULER_RESNET_THREADS"
DEFAULT_THREADS = 1


def sweep_threads():
    """Worker cap for sweeps, read from the environment (default 1)."""
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw)) if raw.strip() else DEFAULT_THREADS
    except ValueError:
        return DEFAULT_THREADS


# --- Tensor core ---
POWER_ITERS = 100              # power iteration steps for spectral estimates
POWER_SAFETY_FACTOR = 1.05     # inflation applied to power-iteration certificates
EXACT_JACOBIAN_MAX_WIDTH = 16  # widths up to this use exact SVD certificates

# --- Network ---
BN_EPS = 1e-5
BN_MOMENTUM = 0.1              # running-stat EMA weight of the new batch
INIT_GAIN = 1.0                # weights ~ N(0, (g / sqrt(in_dim))^2)
DEFAULT_WIDTH = 16
DEFAULT_DEPTH = 10
DEFAULT_H = 0.1
DEFAULT_NUM_CLASSES = 2

# --- TWO-MOON data ---
MOON_RADIUS = 1.0
MOON_NOISE_STD = 0.15
MOON_N_PER_CLASS = 500
TRAIN_FRACTION = 0.5
TRAIN_NOISE_SEED_OFFSET = 7919   # extra training-set noise is drawn from data.seed + this

# --- Training ---
LEARNING_RATE = 0.01
MOMENTUM = 0.9
BATCH_SIZE = 32
EPOCHS = 200
LOG_EVERY = 20                 # epochs between progress log lines

# --- Diagnostics ---
BOUND_TOLERANCE = 1e-9
FD_DELTA = 1e-5
FD_SAMPLES = 20
FD_MIN_GRAD_FRACTION = 1e-3    # parameters below this share of the max grad are not sampled

# --- Experiments ---
EULER_LAMBDA = -2.3            # built-in IVP: x' = -2.3 x, x(0) = 1
EULER_T_END = 3.0
EULER_H_LIST = [1.0, 0.5, 0.1, 0.01]
GRID_H = [0.001, 0.01, 0.1, 0.5, 1.0]
SEEDS = [0, 1, 2, 3, 4]
NOISE_LEVELS = [0.0, 0.1, 0.3]
SNAPSHOT_BLOCKS = [0]
PERTURBATION_NORMS = [0.01, 0.1]

# --- Output format ---
FLOAT_FORMAT = ".17g"          # lossless float64 round-trip
CSV_LINE_END = "\n"
