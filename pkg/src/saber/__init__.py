"""Demonstration-sequence selection: library store, scored beam-search data
construction, a task-aware decoder-only sequence model, baselines, and
evaluation metrics."""

__version__ = "0.1.0"
