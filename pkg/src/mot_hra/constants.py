PROJECT_NAME = "mot-hra"
LOGGER_NAME = "mot-hra"

# Token spans in sequence order, and the expert that owns each span
SPAN_IMG = "img"
SPAN_TXT = "txt"
SPAN_TRAJ3D = "traj3d"
SPAN_MANO = "mano"
SPAN_ACTION = "action"
SPAN_ORDER = (SPAN_IMG, SPAN_TXT, SPAN_TRAJ3D, SPAN_MANO, SPAN_ACTION)

EXPERT_VL = "vl"
EXPERT_INTENTION = "intention"
EXPERT_FINE = "fine"
EXPERT_ORDER = (EXPERT_VL, EXPERT_INTENTION, EXPERT_FINE)
SPAN_OWNER = {
    SPAN_IMG: EXPERT_VL,
    SPAN_TXT: EXPERT_VL,
    SPAN_TRAJ3D: EXPERT_VL,
    SPAN_MANO: EXPERT_INTENTION,
    SPAN_ACTION: EXPERT_FINE,
}
SHARED_GROUP = "shared"

# Hand state layout: wrist translation + quaternion, then 15 joint quaternions
WRIST_DIM = 7
N_JOINTS = 15
JOINT_DIM = 4 * N_JOINTS
HAND_DIM = WRIST_DIM + JOINT_DIM

# Named random streams split from the root seed
STREAM_DATA = "data"
STREAM_INIT = "init"
STREAM_DROPOUT = "dropout"
STREAM_FLOW_TIME = "flow_time"
STREAM_FLOW_NOISE = "flow_noise"
STREAM_EVAL = "eval"
RANDOM_STREAMS = (
    STREAM_DATA,
    STREAM_INIT,
    STREAM_DROPOUT,
    STREAM_FLOW_TIME,
    STREAM_FLOW_NOISE,
    STREAM_EVAL,
)

# Dataset splits
SPLIT_TRAIN = "train"
SPLIT_HELD_OUT_INSTRUCTION = "held-out-instruction"
SPLIT_HELD_OUT_LAYOUT = "held-out-layout"
SPLITS = (SPLIT_TRAIN, SPLIT_HELD_OUT_INSTRUCTION, SPLIT_HELD_OUT_LAYOUT)

# File formats
CHECKPOINT_MAGIC = b"MOTH"
CHECKPOINT_VERSION = 1
DATASET_MAGIC = b"MOTD"
DATASET_VERSION = 1

# CLI exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_NUMERIC_FAILURE = 4

# Synthetic-world vocabulary sizes
N_VERBS = 3
N_SHAPES = 4
N_COLORS = 4
TEXT_VOCAB_SIZE = 1 + N_VERBS + N_SHAPES + N_COLORS

# Ablation names accepted on the command line
ABLATION_NONE = "none"
ABLATION_NO_TRAJ3D = "no-traj3d"
ABLATION_NO_INTENTION = "no-intention"
ABLATION_NO_INSULATION = "no-insulation"
ABLATIONS = (ABLATION_NONE, ABLATION_NO_TRAJ3D, ABLATION_NO_INTENTION, ABLATION_NO_INSULATION)
