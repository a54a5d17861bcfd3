"""Experiment harness: configs, training runs, studies and the CLI."""
