# (c) 2024 Niels Provos
#
# Shared numeric defaults for the billiards world, the renderer, the predictors
# and the planner.

BALL_RADIUS = 25.0
BALL_MASS = 1.0

FORCE_MIN = 30000.0
FORCE_MAX = 80000.0
# 80K N maps to 10 px/step
IMPULSE_SCALE = 1.0 / 8000.0
MAX_SPEED = 10.0

RESTITUTION = 1.0
DAMPING = 0.0
MAX_EVENTS_PER_STEP = 8

EPS_PENETRATION = 1e-9
EPS_CONTACT = 1e-6
EPS_TIE = 1e-9
EPS_VELOCITY = 1e-6

TRAIN_LENGTH_RANGE = (300.0, 550.0)
LARGE_LENGTH_RANGE = (800.0, 1200.0)
SEQ_LEN_RANGE = (20, 200)
MAX_PLACEMENT_TRIES = 10000
# ball counts of the n-ball transfer worlds; the FC model needs a slot for each ball
TRANSFER_BALLS = (2, 3, 4, 6)
MAX_BALLS = max(TRANSFER_BALLS)

GLIMPSE_SIZE = 64
GLIMPSE_RESOLUTION = 32
FRAME_RESOLUTION = 32
STACK_DEPTH = 4

INTENSITY_BALL = 1.0
INTENSITY_WALL = 0.6
INTENSITY_INTERIOR = 0.0
INTENSITY_EXTERIOR = 0.3
WALL_THICKNESS = 3
# cv2 sub-pixel precision bits
DRAW_SHIFT = 4

HORIZON = 20
NEAR_COLLISION_WINDOW = 4
HIT_THRESHOLDS = (10, 25, 50)
PLAN_ROLLOUT_STEPS = 100
MIN_TARGET_DISTANCE = 50.0

MODEL_CV = 'cv'
MODEL_OC = 'oc'
MODEL_FC = 'fc'
MODEL_ORACLE = 'oracle'
MODEL_RANDOM = 'random'
MODEL_STATIC = 'static'

STRATUM_OVERALL = 'overall'
STRATUM_NEAR = 'near_collision'
STRATUM_FAR = 'far'

GOAL_PUSH = 'push_to_location'
GOAL_HIT = 'hit_ball'

PARAM_POLAR = 'polar'
PARAM_CARTESIAN = 'cartesian'

TRAJECTORY_MAGIC = b'BLRD1'
CHECKPOINT_MAGIC = b'BLNN1'
MANIFEST_FILE = 'manifest.json'
SEED_ENV_VAR = 'CUEPLAN_SEED'

EXIT_VALIDATION = 1
EXIT_GENERATION = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

# held-out evaluation datasets draw from a disjoint seed range
EVAL_SEED_OFFSET = 1000003
