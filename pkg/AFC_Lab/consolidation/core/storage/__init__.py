from .checkpoint import (Checkpoint, CheckpointError, capture, load_checkpoint, restore_importance, restore_model,
                         save_checkpoint)
from .records import read_csv, read_json, write_csv, write_json
