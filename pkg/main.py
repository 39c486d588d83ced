import sys

from cli_io import run_cli


def main() -> int:
    """Console entry point for ``slipdisk``."""
    return run_cli(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
