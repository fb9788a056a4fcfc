"""potvit: power-of-two PTQ toolkit, integer-only tiny-ViT engine, and accelerator cost model."""

__version__ = "0.1.0"
