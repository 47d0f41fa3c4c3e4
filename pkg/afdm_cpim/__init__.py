"""Affine frequency division multiplexing with chirp-permutation index modulation."""
