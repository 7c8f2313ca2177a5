"""Harness for agents that answer questions over multi-page document images."""

__version__ = "0.1.0"
