"""Multi-task BiLSTM-CRF tagging for argument component identification."""

__version__ = "0.1.0"
