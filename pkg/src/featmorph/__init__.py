"""featmorph: image editing by linear moves in convnet feature space."""

__version__ = "0.1.0"
