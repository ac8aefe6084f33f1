"""Velocity-field network, flow-matching training and the experiment runner."""
