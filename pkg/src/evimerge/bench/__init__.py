"""Desk-scale benchmark: synthetic tasks, corruptions, baselines and ablations."""
