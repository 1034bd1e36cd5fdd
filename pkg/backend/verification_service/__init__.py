"""Randomized property suites behind the verify subcommand."""
