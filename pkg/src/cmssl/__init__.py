"""Context/motion decoupled self-supervised video representation learning,
desk scale: a mini block-matching codec supplies I-frame and motion-vector
supervision for a jointly trained context-matching + motion-prediction
contrastive objective."""

__version__ = "0.1.0"
