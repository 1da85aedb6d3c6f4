"""CLI subcommand handlers

Each module exposes `register(subparsers, parent)` adding its subcommands.
"""
