"""Differentiable forward model: fields, geometry, shading, inter-reflection, volume rendering."""
