"""Numerical laboratory for monotone, quadratic-growth BSDEs."""
