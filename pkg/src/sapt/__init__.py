"""Prompt tuning for frozen dual-encoder models, aligned with LLM-generated
class descriptions.

Subpackages cover the description catalog, the frozen-encoder abstraction
with a deterministic toy backend, the alignment math (cross-attention,
relevance, specificity, fusion), the training objective and SGD loop, the
evaluation protocols, and the ``sap`` command line.
"""

__version__ = "0.1.0"
