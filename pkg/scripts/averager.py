#!/usr/bin/env python3
"""Entry point for the averaging pipeline; see `averaging.cli` for usage."""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from averaging.cli import main

if __name__ == "__main__":
    sys.exit(main())
