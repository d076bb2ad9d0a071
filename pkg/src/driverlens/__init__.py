"""Synthetic-data laboratory for measuring driver-blindness in glucose forecasters."""

__version__ = "0.1.0"
