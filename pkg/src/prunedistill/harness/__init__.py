"""Experiment plumbing: datasets, configuration, runs, reports and the CLI."""
