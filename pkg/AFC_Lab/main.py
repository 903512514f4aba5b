#!/usr/bin/env python3
"""
Main entry point for the AFC Lab
"""

import sys
import os

# Add AFC_Lab to path so that sibling packages resolve
app_path = os.path.dirname(os.path.abspath(__file__))
if app_path not in sys.path:
    sys.path.insert(0, app_path)

from consolidation.run_lab import main

if __name__ == "__main__":
    sys.exit(main())
