DEBUG = False
VERSION = '0.1.0'
OUTPUT_DIR_PATH = None

CATEGORY_NAMES = ("circle", "square", "triangle")

# --- detector ---
INPUT_SIZE = 64
NUM_CATEGORIES = len(CATEGORY_NAMES)
HIDDEN_WIDTHS = (16, 32, 32, 32)
DOWNSAMPLE_LAYER = 1
LAYER_DILATIONS = (1, 1, 2, 4)
VISUAL_THRESHOLD = 0.3
HEATMAP_BIAS_INIT = -2.19
SIZE_BIAS_INIT = 20.0

# --- training ---
EPOCHS = 30
LEARNING_RATE = 0.01
BATCH_SIZE = 16
MOMENTUM = 0.9
LR_STEPS = (20, 27)
SIZE_LOSS_WEIGHT = 0.1
FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
GRAD_CLIP = 10.0

# --- scenes ---
MIN_OBJECTS = 1
MAX_OBJECTS = 4
MIN_BOX = 10
MAX_BOX = 32
MAX_PAIR_IOU = 0.3
NOISE_AMPLITUDE = 0.15
NOISE_GRID = 8
MIN_CONTRAST = 0.2

# --- attacks ---
T_ATTACK = 0.1
MAX_INNER_SCA = 20
MAX_OUTER_SCA = 50
EPS_DCA = 8 / 255
MAX_OUTER_DCA = 10
EPS_CEILING = 16 / 255
DEEPFOOL_OVERSHOOT = 1.02
DEEPFOOL_MAX_STEPS = 50
SOLVER_OVERSHOOT = 1.05

# --- evaluation ---
IOU_THRESHOLD = 0.5
REPORT_SCHEMA = "cwreport/1"
PERTURBED_EPS = 1e-12

WORKERS = 4
