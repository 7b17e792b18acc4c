"""Experiment harness: data, training, analyses and the command line."""
