"""Deterministic simulated network for exercising bundle endpoints."""
