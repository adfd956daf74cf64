"""ConQuer: concept-grounded quiz generation and LLM-judge evaluation."""

__version__ = "0.1.0"
