"""Artifact writing, run manifests and consistency comparison."""
