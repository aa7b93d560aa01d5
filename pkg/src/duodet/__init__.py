"""duodet: a desk-scale two-stream (visible + thermal) object detector with
degradation-robust base-and-auxiliary training and LAMR/AP evaluation."""

__version__ = "0.1.0"
