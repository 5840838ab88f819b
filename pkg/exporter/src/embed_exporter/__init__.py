"""News-embedding exporter: pretrained checkpoints in, NRE1 stores and
named-tensor weight containers out."""

__version__ = "0.1.0"
