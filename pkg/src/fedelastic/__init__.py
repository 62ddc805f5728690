"""Federated learning with elastic-net regularised local updates."""

from __future__ import annotations

__version__ = "0.1.0"
