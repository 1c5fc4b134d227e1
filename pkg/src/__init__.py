"""ProxyTokens: cross-modal proxy tokens for missing-modality classification"""

__version__ = "0.1.0"
