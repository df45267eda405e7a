"""Confidence-gain reward shaping for group-relative policy optimization.

Modules: ``trace`` (segmentation and confidence series), ``env`` (exact
chain-arithmetic simulator), ``reward`` (terminal rewards and advantages),
``optimizer`` (Dr.GRPO training loop), ``analysis`` (log statistics),
``experiments`` (multi-seed helpers) and ``cli``.
"""

__version__ = "0.1.0"
