"""Metro delay travel-choice pipeline.

Reconstructs trips from fare-collection streams, mines regular travel
patterns, extracts structured delay events from operator logs, identifies
affected passengers by spatiotemporal overlap, labels their wait/abandon
choices, and predicts choices with a prompt-driven LLM path plus
from-scratch tree-ensemble baselines.
"""

__version__ = "0.1.0"
