"""Tool-integrated trace verification: protocol, rewards, retrieval, Dr.GRPO and test-time search."""

from __future__ import annotations

__version__ = "0.1.0"
