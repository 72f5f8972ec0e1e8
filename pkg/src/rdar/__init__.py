"""Learned per-agent relevance for a frozen driving policy.

The package trains a masking policy that scores surrounding agents, samples
top-k subsets during training, and feeds only the selected agents to a fixed
rule-based driver inside a deterministic 2D simulator. Evaluation sweeps k
and compares against closest-k, random-k, and leave-one-out attribution
baselines.
"""

__version__ = "0.1.0"
