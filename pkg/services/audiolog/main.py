"""Runs the audiolog command-line interface from a source checkout."""
import sys

from audiolog import cli

if __name__ == '__main__':
    sys.exit(cli.main())
