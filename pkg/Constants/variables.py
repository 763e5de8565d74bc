import os

DATA_DIR = "data"
RUNS_DIR = "runs"

RIG_PATH = os.path.join(DATA_DIR, "rig.json")
VOCAB_PATH = os.path.join(DATA_DIR, "vocab.txt")
DATASET_PATH = os.path.join(DATA_DIR, "toy_dataset.npz")
CONFIG_PATH = "config.json"


class Rig:
    NUM_PARTS = 16
    SHAPE_DIM = 8
    NEIGHBORS = 4  # Kn for inverse LBS
    DIST_EPS = 1e-8  # meters, clamp for inverse-distance weights
    POSE_BASIS_AMPLITUDE = 0.01  # meters


class Rays:
    SAMPLES = 28
    HEIGHT = 128
    WIDTH = 64
    FOCAL = 215.0  # pixels at HEIGHT
    POSITION = (0.0, 0.9, 3.2)
    LOOK_AT = (0.0, 0.9, 0.0)
    UP = (0.0, 1.0, 0.0)
    CHUNK = 256  # rays per render work item


class Text:
    EMBED_DIM = 64
    MAX_TOKENS = 32
    PAD = "<pad>"
    UNK = "<unk>"


class Fields:
    FEATURE_DIM = 64
    HIDDEN_LAYERS = 3
    HIDDEN_UNITS = 64
    OMEGA0 = 30.0
    ALPHA_INIT = 0.01  # meters
    MIXTURE_M = 2.0
    MIXTURE_N = 8
    BACKGROUND = (1.0, 1.0, 1.0)


class Disc:
    WIDTHS = (32, 64, 128, 256)
    SEG_DIM = 64
    LEAKY_SLOPE = 0.2
    R1_WEIGHT = 10.0
    R1_MODE = "autograd"
    R1_FD_GRID = 8
    R1_FD_STEP = 1e-4
    NUM_LABELS = 17  # background + 16 parts


class LossWeights:
    OFFSET = 1.5
    EIKONAL = 0.5


class Train:
    STEPS = 5000
    BATCH_SIZE = 4
    HEIGHT = 64
    WIDTH = 32
    PATCH = 32
    LR_G = 2e-4
    LR_D = 2e-4
    BETAS = (0.0, 0.99)
    CHECKPOINT_EVERY = 500
    LOG_EVERY = 10
    EIKONAL_POINTS = 1024
    RECON_WEIGHT = 0.0
    SEED = 0


class Dataset:
    COUNT = 200
    SEED = 1234
    POSE_STD = 0.15  # radians
    ROOT_YAW = 0.4  # radians, uniform half-range
    SHAPE_STD = 0.0


CHECKPOINT_VERSION = 1
METRICS_FILE = "metrics.csv"
PSNR_INFINITY = "inf"
