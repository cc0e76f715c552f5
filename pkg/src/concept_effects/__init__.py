"""Causal effect of a text concept on a classifier, via adversarial concept forgetting."""
