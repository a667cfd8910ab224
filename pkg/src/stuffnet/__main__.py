"""Allow ``python -m stuffnet``."""

from stuffnet.cli import cli

if __name__ == "__main__":
    cli()
