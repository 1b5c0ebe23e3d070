"""Add two numbers given on the command line; the result goes to result.txt."""

import sys
from pathlib import Path

total = float(sys.argv[1]) + float(sys.argv[2])
print(f"{sys.argv[1]} + {sys.argv[2]} = {total!r}")
Path("result.txt").write_text(repr(total), encoding="utf-8")
