"""Robustness and transferability audits for feature-importance explanations."""

__version__ = "0.1.0"
