"""Occlusion-aware optical flow on synthetic scenes.

Four stages at a single 1/8 resolution: feature encoding with global
matching, forward-backward occlusion scoring, occlusion-extended
self-attention that rectifies the matched flow under repulsion and
attraction constraints, and iterative refinement. Ships a scene
generator with exact ground truth, a trustworthiness metric suite, a
training/evaluation harness, and a CLI (gen / train / eval / dump-attn
/ ablate).
"""

__version__ = "0.1.0"
