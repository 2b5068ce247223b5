"""delve: a deterministic, offline-testable knowledge-agent stack.

The package wires a multi-step search agent (vector retrieval as the sole
tool, context compression as middleware) to reward evaluation, off-policy RL
dataset construction, test-time-compute strategies, a synthetic-QA pipeline,
and trajectory behavior analytics. Every component runs offline against a
scripted model client and a deterministic hash embedder.
"""

__version__ = "0.1.0"
