"""Synthetic-trace toolkit for evaluating behavioral evasion of ransomware detectors.

Submodules: ``trace``, ``ingest``, ``simulator``, ``features``, ``detector``,
``analysis``, ``search``, and the ``config``/``pipeline``/``cli`` orchestration.
"""

__version__ = "0.1.0"
