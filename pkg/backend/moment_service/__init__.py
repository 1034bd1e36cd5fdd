"""Moment inequalities, interval propagation and tail-order estimation."""
