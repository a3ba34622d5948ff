MODALITIES = ('rtg', 'state', 'action')
RTG, STATE, ACTION = 0, 1, 2

DATASET_MAGIC = b'MTMD'
DATASET_FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b'MTMC'
CHECKPOINT_FORMAT_VERSION = 1

OUT_DIR_ENV = 'MTM_OUT_DIR'
DEBUG_ENV = 'TRAJMASK_DEBUG'
ACCEPTANCE_ENV = 'TRAJMASK_ACCEPTANCE'
DEFAULT_RESULT_DIR = 'Result'

STD_FLOOR = 1e-6
KEY_PADDING_BIAS = -1e9
TIME_ENCODING_BASE = 10000.0

MASK_KINDS = ('random', 'random_autoregressive', 'bc', 'rcbc', 'id', 'fd', 'full', 'forecast')
CAPABILITY_KINDS = ('BC', 'RCBC', 'ID', 'FD', 'FULL', 'FORECAST')
POLICY_TIERS = ('expert', 'medium', 'random')
REPRESENTATIONS = ('raw', 'mtm_state', 'mtm_state_action')
