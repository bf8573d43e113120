#!/usr/bin/env python3
"""
omni-engine: reward and optimization engine for interleaved multimodal reasoning.

Usage: python omni_engine.py <subcommand> [flags]   (see --help)
"""
import sys

from cli.main import main

if __name__ == "__main__":
    sys.exit(main())
