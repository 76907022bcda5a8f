"""Motion deblurring engine: channel-attention transformer encoder-decoder,
training pipeline, and full-reference evaluation suite, all on CPU."""

__version__ = "0.1.0"
