"""
Desk-scale cross-view knowledge transfer, end to end and fully testable.

The package turns timestamped narrations into a clip corpus, generates a
deterministic synthetic paired-view world, trains a four-stage pipeline
(per-view captioning, third-person specialization, cross-view mapping with
cycle and distribution-alignment losses, first-person instruction tuning with
low-rank adapters), and scores checkpoints on generated benchmark items.
Everything runs on numpy: no GPU, no external models, exact reproducibility.

Command-line surface: ``exoego build-clips | stats | synth | train | eval |
report``.
"""

from . import (
    arrays,
    config,
    corpus,
    datasets,
    evalharness,
    jsonio,
    losses,
    models,
    report,
    synthworld,
    trainer,
)

__version__ = "0.1.0"

__all__ = [
    "arrays",
    "config",
    "corpus",
    "datasets",
    "evalharness",
    "jsonio",
    "losses",
    "models",
    "report",
    "synthworld",
    "trainer",
    "__version__",
]
