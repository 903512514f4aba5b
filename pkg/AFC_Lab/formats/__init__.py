"""Binary file formats used by the lab."""

from .idx_codec import (
    MAGIC_IMAGES,
    MAGIC_LABELS,
    IdxFormatError,
    read_idx,
    write_idx,
)

__all__ = [
    "MAGIC_IMAGES",
    "MAGIC_LABELS",
    "IdxFormatError",
    "read_idx",
    "write_idx",
]
