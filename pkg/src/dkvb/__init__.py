"""Continual learning with a discrete key-value bottleneck over frozen
text-encoder embeddings."""

from .bottleneck import (BottleneckConfig, Codebooks, ema_init, forward,
                         load_codebooks, nearest_keys, quantize, retrieve,
                         save_codebooks, segment)
from .harness import (KeyInitStrategy, RunResult, accuracy, bwt, build_model,
                      macro_f1, progressive_eval, run_scenario, train_task)
from .heads import (HeadRegistry, ParametricDecoder, decode_nonparametric,
                    decode_parametric, pool, route)
from .model import DkvbModel, HyperParams
from .numkit import OptimState, RngStream, cross_entropy_with_grad, dropout_mask, \
    lazy_step, softmax
from .scenario import ScenarioSpec, TaskSet, build_scenario, build_scenario_from_records
from .store import (DatasetManifest, EmbeddingRecord, ToyEncoderSpec,
                    read_manifest, read_records, toy_encode, write_manifest,
                    write_records)

__version__ = "0.1.0"
