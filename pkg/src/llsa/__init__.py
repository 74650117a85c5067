"""Log-linear sparse attention: hierarchical Top-K block selection, KV-enriched
block-sparse attention and a mask-free backward pass.

Quick use::

    import llsa
    cfg = llsa.LLSAConfig(n=4096, d=64, block_size=16, top_k=8, levels=2)
    out, ctx = llsa.attend(q, k, v, cfg)
    grads = llsa.attend_backward(d_out, ctx)
"""

from ._backend import (
    available_backends,
    current_backend,
    get_num_threads,
    set_num_threads,
    use_backend,
)
from .attention import (
    Context,
    EnrichedKVPlan,
    ForwardState,
    attend,
    attend_heads,
    build_plan,
    forward_mul_accs,
    llsa_forward,
)
from .core import (
    LevelIndices,
    LLSAConfig,
    ReweightMode,
    SelectionResult,
    ValidatedConfig,
    auto_levels,
    default_tolerance,
    effective_block_count,
    get_precision,
    max_levels,
    set_precision,
    validate_config,
)
from .errors import (
    ConfigError,
    DivisibilityError,
    FormatError,
    IndexOutOfRange,
    IoError,
    LevelError,
    LLSAError,
    NonFiniteError,
    NotSquareBlock,
    OracleSizeError,
    PrecisionError,
    ShapeMismatch,
    StaleState,
    TopKError,
)
from .grad import (
    GradientSet,
    attend_backward,
    attend_heads_backward,
    backward_mul_accs,
    kv_backward,
    kv_backward_masked,
    llsa_backward,
)
from .indexmap import TransposedIndices, full_transpose, table_pairs, transpose_all, transpose_indices
from .pyramid import Pyramid, build_pyramid, pool_backward
from .reorder import Direction, Permutation, apply_permutation, build_reorder
from .selection import hierarchical_topk, select_coarsest, select_level
from .tensorio import Distribution, gen_random, read_tensor, write_tensor

__version__ = "0.1.0"
