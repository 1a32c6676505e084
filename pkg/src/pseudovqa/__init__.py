"""Label-efficient VQA adaptation on a synthetic out-of-distribution benchmark.

Two-stage pipeline: a pseudo-QA generator is trained on scarce labeled pairs
with teacher-caption distillation restricted to QA-relevant parameters, then
the VQA model is fine-tuned on labeled plus generated pairs.
"""

__version__ = "0.1.0"

from .model import ModelConfig, ParameterStore, VisualInput  # noqa: F401
from .pipeline import RunConfig, default_run_config, run_matrix  # noqa: F401
from .synthetic import BenchmarkSpec  # noqa: F401
from .tensor import Tape, Tensor  # noqa: F401
