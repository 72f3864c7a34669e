"""Fetal plane quality models: tensor engine, networks, training, metrics."""
