"""Closed-loop OPF with state-estimation feedback for distribution feeders."""
