"""End-to-end multilingual speech affect recognition from raw narrow-band waveforms.

A small, self-contained research stack: numpy numerical kernels with exact
reverse-mode gradients, an 8 kHz audio front end, a 1-D convolutional model
with per-layer global average pooling and weighted-average fusion, training
with Adam and multilingual fine-tuning, evaluation metrics, model
introspection, and a deterministic synthetic corpus generator.
"""

__version__ = "0.1.0"
