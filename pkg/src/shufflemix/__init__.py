"""Channel-wise hidden-state mixup training laboratory.

Everything runs on float64 numpy arrays with manual forward/backward passes,
so every number a run produces is reproducible from its seed alone.
"""

from shufflemix.errors import (
    DataFormatError,
    DimensionError,
    EvaluationError,
    ParameterError,
    ShuffleMixError,
)

__all__ = [
    "DataFormatError",
    "DimensionError",
    "EvaluationError",
    "ParameterError",
    "ShuffleMixError",
]

__version__ = "0.1.0"
