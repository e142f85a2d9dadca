"""Desk-scale cellular image classification toolkit."""
