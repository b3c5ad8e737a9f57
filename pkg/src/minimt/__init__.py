"""Minimal from-scratch neural machine translation toolkit.

Word-level and BPE tokenization, an encoder-decoder Transformer on a
small reverse-mode autodiff core, Adam training with warmup, greedy and
beam decoding, and strict corpus BLEU, plus English <-> Nigerian Pidgin
baseline presets.
"""

__version__ = "0.1.0"
