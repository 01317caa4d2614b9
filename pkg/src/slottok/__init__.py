"""slottok: a desk-scale lab for latent-slot audio tokenization.

Train a compressor-quantizer-decompressor with a fixed set of learned
latent tokens over codec-space features, score each slot's association
with global factors, and perform importance-guided token swaps that
transfer factors between utterances.
"""

__version__ = "0.1.0"
