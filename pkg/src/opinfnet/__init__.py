"""Composable, structure-preserving operator inference for reduced-order models."""
