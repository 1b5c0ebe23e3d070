"""Entry point for python -m flowmesh."""

from flowmesh.cli import app

if __name__ == "__main__":
    app()
