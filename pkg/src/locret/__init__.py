"""Attention-localized instance retrieval toolkit.

A small numpy library covering the full desk-scale loop: a from-scratch
differentiable layer kit, an attention-localization retrieval head, toy
backbone and end-to-end training, descriptor search (exact and graph ANN),
revisited-protocol evaluation, and a train/test category-overlap cleanup
pipeline with a human review service.
"""

__version__ = "0.1.0"
