"""Trace analysis, heavy-tail inference and routing simulation for multi-agent coordination."""

from __future__ import annotations

__version__ = "0.1.0"
