"""Linkage-free dual system estimation."""
