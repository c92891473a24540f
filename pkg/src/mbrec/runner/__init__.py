"""Experiment runner: configuration, training loop, reports and the CLI."""
