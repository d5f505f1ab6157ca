"""Harness for evaluating malware artefact detection tools against an oracle baseline."""

__version__ = "0.1.0"
