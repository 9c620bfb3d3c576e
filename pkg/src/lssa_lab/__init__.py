import sys


def main() -> None:
    from lssa_lab.cli import run

    sys.exit(run())
