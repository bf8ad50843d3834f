"""Panoptic depth toolkit."""
