"""Chan-Vese (ACWE) loss for training a recurrent CNN segmenter, with a
classical level-set baseline, synthetic phantoms and an evaluation harness."""

__version__ = "0.1.0"
