"""Spiking path-integration simulator for a virtual insect."""
