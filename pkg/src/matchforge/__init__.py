"""matchforge: schema matching with late-interaction retrieval, LLM candidate
reasoning, MCQ confidence scoring with abstention, zero-shot bootstrap
self-improvement, an evaluation harness, and a human-in-the-loop review
service."""

__version__ = "0.1.0"
