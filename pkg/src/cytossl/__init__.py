"""Self-supervised cytology representation pipeline.

Stages: patch preprocessing, ViT pretraining with two-view self-distillation
and masked image modeling, frozen-encoder feature extraction, attention-MIL
classification, and a repeated-split evaluation protocol.
"""

__version__ = "0.1.0"
