"""Mean-field variational inference for LDA and MMSB with exact small-instance oracles."""

__version__ = "0.1.0"
