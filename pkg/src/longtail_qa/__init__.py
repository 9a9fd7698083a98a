"""Long-tailed multi-task QA training harness.

Curates Zipf-distributed task mixtures, selects per-instance soft prompts
from a trainable pool, mines knowledge from an LM oracle with a
retrieve-then-rerank frame, and trains everything jointly with two-stage
and adaptive mutual knowledge distillation.
"""

__version__ = "0.1.0"
