"""Debiased rating prediction from missing-not-at-random explicit feedback."""
