"""Experiment harness: config, training loops, gradient checks and the CLI."""
