"""Training-free structured compression with Gram-based ridge compensation.

Narrow the hidden width of network blocks by pruning or folding, then
restore each block's input-output behavior by solving a closed-form ridge
reconstruction on a small unlabeled calibration set and merging the result
into the downstream weights.
"""

from .calibration import (
    GramStats,
    accumulate_gram,
    closed_loop_pass,
    input_feature_norms,
    merge_gram,
)
from .compensation import (
    CompensationResult,
    RidgeConfig,
    merge_attention,
    merge_block,
    merge_conv,
    merge_dense,
    merge_ffn,
    naive_reduce_block,
    solve_reconstruction,
)
from .errors import (
    ArgumentError,
    DegenerateStatisticsError,
    FormatError,
    GrailError,
    ShapeError,
    SingularMatrixError,
)
from .io_formats import (
    load_calibration,
    load_gram,
    load_model,
    save_calibration,
    save_gram,
    save_model,
)
from .model import (
    AttentionBlock,
    BlockGraph,
    ConvBlock,
    DenseBlock,
    FfnBlock,
    forward,
)
from .pipeline import CompressionPlan, PlanEntry, compress_graph, uniform_plan
from .reducers import ReducerMap, build_reducer, lift_heads, narrow_rows
from .selectors import (
    SelectionDecision,
    select_fold,
    select_heads,
    select_magnitude,
    select_wanda,
)

__version__ = "0.1.0"
