"""Experiment harness: configs, repeated-run verification, sweeps, divergence probes."""
