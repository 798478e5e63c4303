"""Typed error hierarchy shared by every module.

Every failure the engine can diagnose raises an :class:`EngineError` carrying
a stable, machine-readable code (``BadMagic``, ``DimMismatch``, ...). The CLI
maps these to ``ERROR <code>: <message>`` on stderr and exit status 2;
anything else is an internal error (exit 1).
"""

from __future__ import annotations


class EngineError(Exception):
    """A diagnosed failure with a stable error code."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message
