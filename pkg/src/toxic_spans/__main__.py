#!/usr/bin/env python3
"""Toxic spans toolkit entry point."""

import sys

from toxic_spans.cli import main


if __name__ == "__main__":
    sys.exit(main())
