"""Denoiser inference service speaking the denoise-wire HTTP protocol."""

__version__ = "0.1.0"

PROTOCOL_VERSION = "denoise-wire/1"
