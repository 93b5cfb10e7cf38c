#!/usr/bin/env python3
"""
CacheRoute
Entry point for the command-line interface
"""

from app.cli import cli

if __name__ == '__main__':
    cli()
