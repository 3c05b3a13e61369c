__version__ = '1.0'

FEATURE_TABLE_FORMAT_VERSION = 'v1'
CHECKPOINT_FORMAT_VERSION = 'v1'
REPORT_FORMAT_VERSION = 'v1'
