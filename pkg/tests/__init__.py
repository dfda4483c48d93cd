"""
Test suite for the PGS toolkit.

Tests import the package as ``src``; the repository root is put on the path so the suite
also runs from a plain checkout without ``pip install -e .``.
"""
import sys
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent
if str(REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(REPO_ROOT))
