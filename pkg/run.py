"""
Liver fibrosis fusion: entry point.

Orchestrates: gen-data → train → eval → export-roc (plus predict and the
ablation sweep). See ``python run.py --help``.
"""

from __future__ import annotations

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
