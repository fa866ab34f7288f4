"""patchsim: patch-level autoregressive multi-agent traffic simulation."""

__version__ = "0.1.0"
