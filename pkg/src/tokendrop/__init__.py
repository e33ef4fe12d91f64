"""Three-stage vision-token dropping over a toy multimodal transformer."""

from .accounting import CostReport, compression_ratio, flops_layer, flops_prefill, kv_bytes, kv_mb
from .cache import KVCache
from .config import PipelineConfig, load_config
from .decode import DecodeConfig, decode_step, evict_output_aware, run_decode
from .encode import (EncodeConfig, KeyTokenSet, build_key_set, encode_stage, local_spatial_merge,
                     merge_decision, merge_window, partition_windows, window_similarity)
from .errors import (CacheError, CalibrationError, ConfigError, DegenerateRowError, ParseError,
                     ShapeError, TokenDropError, UndefinedSimilarityError)
from .fixtures import Fixture, FixtureSpec, generate_fixture, read_pgm
from .model import (PRESETS, ModelGeometry, ToyConfig, ToyWeights, encode_patches, encoder_layer_forward,
                    get_geometry, lm_layer_forward, synthesize_weights)
from .numeric import SeededSource, cosine_sim, matmul, row_softmax, scaled_attention
from .pipeline import run_pipeline, run_suite
from .prefill import (PrefillConfig, calibrate_gamma, candidate_set, global_scores, individual_filter,
                      prune_at_layer, run_prefill)
from .tokens import MultimodalSequence, TokenGrid, VisionToken
from .trace import DropEvent, emit_trace, read_trace, replay_trace

__version__ = "0.1.0"
