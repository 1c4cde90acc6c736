"""Commonsense scene-graph target localization and object search."""
__version__ = "0.1.0"
