#!/usr/bin/env python3
"""Run simrel pipeline stages on a network model file."""

import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from simrel.cli import main

if __name__ == "__main__":
    sys.exit(main())
