import os

from dotenv import load_dotenv

load_dotenv()

# Perceptual hash (DCT-PHA)
PHASH_SIZE  = 32
PHASH_BLOCK = 8
PHASH_BITS  = PHASH_BLOCK * PHASH_BLOCK
# 0.299 / 0.587 / 0.114, kept as integers so equal channels map back exactly
GRAY_WEIGHTS = (299, 587, 114)
GRAY_SCALE   = 1000

# Media
DEFAULT_D_MIN   = 16
PNM_EXTENSIONS  = (".pgm", ".ppm", ".pnm")
Y4M_MAGIC       = b"YUV4MPEG2"
SSIM_WINDOW     = 8
SSIM_K1         = 0.01
SSIM_K2         = 0.03
SSIM_DATA_RANGE = 255.0
TRIGGER_MANIFEST = "manifest.tsv"

# Synthetic key videos: frame hashes stay this far apart, coefficients this far off the threshold
SYNTH_FRAME_DISTANCE = 20
SYNTH_HASH_MARGIN    = 3.0
SYNTH_MAX_REDRAWS    = 64

# Training
NUM_CLASSES   = 10
LEARNING_RATE = 0.01
MOMENTUM      = 0.9
BATCH_SIZE    = 32
EVAL_BATCH    = 256
GRADCHECK_STEP = 1e-4
MODEL_MAGIC   = b"TNN1"
MODEL_VERSION = 1

# PCPT
THETA1            = 0.85
THETA2            = 0.60
FINETUNE_FRACTION = 0.10
EMBED_EPOCHS      = 50
ATTACK_EPOCHS     = 50
PRUNE_RATES       = tuple(round(0.1 * i, 1) for i in range(10))
TRACE_FAILURE     = "traceability failure"

# ACPT
CREDENTIAL_LEN     = 8
HASH_ALPHABET      = "0123456789abcdef"
CREDENTIAL_SEP     = "_"
DETECTOR_THRESHOLD = 0.5
ACPT_ACCEPT        = 0.8
ACPT_REJECT        = 0.3
ACPT_INCONCLUSIVE  = "inconclusive"
DETECTOR_SHAPE     = (3, 32, 32)
DETECTOR_EPOCHS    = 50

# Gateway
MAX_LINE_BYTES   = 8 * 1024 * 1024
CLIENT_TIMEOUT_S = 10.0
DEFAULT_BIND     = "127.0.0.1:7878"

# Ledger
GENESIS_DIGEST = "0" * 64
LEDGER_TIME_FMT = "%Y-%m-%dT%H:%M:%SZ"

# Workspace; logs go to <workspace>/logs
WORKSPACE_ENV  = "MODELTRACE_WORKSPACE"
WORKSPACE_ROOT = os.path.abspath(os.environ.get(WORKSPACE_ENV, os.getcwd()))
LOG_DIR        = os.path.join(WORKSPACE_ROOT, "logs")
MANIFEST_NAME  = "workspace.yaml"
