"""dfiw-export: one-time conversion of pretrained VGG-19 checkpoints to
the DFIW container, plus golden activation fixtures for cross-validating
independent implementations of the conv stack."""

__version__ = "0.1.0"
