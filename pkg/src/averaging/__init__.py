"""Multiview essential matrix consistency checking and averaging."""

__all__ = ["geom", "nview", "cover", "admm", "register", "synthbench", "storage", "cli"]
