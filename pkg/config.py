import os
from typing import List

from dotenv import load_dotenv

load_dotenv()

# ──────────────────────────────────────────────────────────
# 1. STFT (analyse / synthese)
# ──────────────────────────────────────────────────────────
SAMPLE_RATE = 16000
FFT_LEN = 512
HOP = 128
WINDOW = "hamming"

# ──────────────────────────────────────────────────────────
# 2. BLOCKS (CSV mixing model)
# One block = one interval of constant mixing vector.
# ──────────────────────────────────────────────────────────
BLOCK_FRAMES = 250
REFERENCE_CHANNEL = 0

# ──────────────────────────────────────────────────────────
# 3. ALGORITHMS
# ──────────────────────────────────────────────────────────
STEP_SIZE = 0.2
GRADIENT_ITERATIONS = 1000
GRADIENT_TOL = 1e-6
AUX_ITERATIONS = 100
AUX_EARLY_STOP_TOL = 1e-6
PILOT_DELTA = 1.0

ALGORITHM_NAMES: List[str] = [
    "bogive_w",
    "ogive_w",
    "block_auxive",
    "overiva",
    "piloted_block_auxive",
    "piloted_overiva",
]

# ──────────────────────────────────────────────────────────
# 4. NUMERICAL FLOORS
# ──────────────────────────────────────────────────────────
EPS_R = 1e-8            # floor on r before phi(r) = 1/r
EPS_REG = 1e-10         # ridge, relative to the trace
EPS_DEN = 1e-12         # w^H C w floor, relative to the trace
EPS_NU = 1e-12
COND_LIMIT = 1e12       # above this, solve_w switches to the ridge system

# ──────────────────────────────────────────────────────────
# 5. ACOUSTICS (image method + moving sources)
# ──────────────────────────────────────────────────────────
SPEED_OF_SOUND = 343.0
FRACTIONAL_DELAY_TAPS = 10
CROSSFADE_FRACTION = 1.0 / 16.0   # crossfade window = fs / 16, half overlap
IMAGE_CHUNK = 100_000

# ──────────────────────────────────────────────────────────
# 6. EVALUATION
# ──────────────────────────────────────────────────────────
METRIC_CAP_DB = 80.0
FAIL_THRESHOLD_DB = -5.0
ATTMAP_SPACING = 0.02          # m, 2 cm grid; quick desk maps override it
ATTMAP_DURATION = 1.0

# ──────────────────────────────────────────────────────────
# 7. RUNTIME (overridable via .env)
# ──────────────────────────────────────────────────────────
LOG_LEVEL = os.getenv("EXTRACTION_LOG_LEVEL", "INFO")
THREADS = int(os.getenv("EXTRACTION_THREADS", "1"))
OUT_DIR = os.getenv("EXTRACTION_OUT_DIR", "out")
PRESETS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", "presets")
