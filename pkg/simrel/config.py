"""Configuration settings for simrel."""

import os
from pathlib import Path

# Base paths
ROOT_DIR = Path(__file__).parent.parent
DATA_DIR = ROOT_DIR / "data"
LOGS_DIR = ROOT_DIR / "logs"
RUNS_DIR = Path(os.environ.get("SIMREL_RUNS_DIR", str(DATA_DIR / "runs")))

# Ensure directories exist
DATA_DIR.mkdir(exist_ok=True)
LOGS_DIR.mkdir(exist_ok=True)

# Logs
EVENTS_LOG_PATH = LOGS_DIR / "simrel_events.log"

# Case-study model files shipped with the repo
CASE_STUDY_PATH = DATA_DIR / "case_study.json"
COMPARISON_STUDY_PATH = DATA_DIR / "comparison_study.json"

# File formats
FORMAT_VERSION = 1


def _env_float(name: str, default: float) -> float:
    return float(os.environ.get(name, default))


def _env_int(name: str, default: int) -> int:
    return int(os.environ.get(name, default))


# Numerical tolerances
TOL_PSD_REL = _env_float("SIMREL_TOL_PSD", 1e-8)
TOL_EQ = _env_float("SIMREL_TOL_EQ", 1e-6)
TOL_SYM = 1e-10
TOL_ROW = 1e-9

# Multiplier search
LAMBDA_MAX = _env_float("SIMREL_LAMBDA_MAX", 1e4)
LAMBDA_ITERATIONS = 200
LAMBDA_PROFILE_POINTS = 11

# Finite abstraction
MC_ROW_SAMPLES = _env_int("SIMREL_MC_ROW_SAMPLES", 10000)
MEMORY_CAP_MB = _env_float("SIMREL_MEMORY_CAP_MB", 512)

# Monte Carlo validation
DEFAULT_SEED = _env_int("SIMREL_SEED", 7)
DEFAULT_TRIALS = _env_int("SIMREL_TRIALS", 10000)
DEFAULT_HORIZON = _env_int("SIMREL_HORIZON", 10)
DEFAULT_THREADS = _env_int("SIMREL_THREADS", 1)
TRIAL_CHUNK = 500
MIN_TRIALS = 100
WILSON_Z = 3.0
