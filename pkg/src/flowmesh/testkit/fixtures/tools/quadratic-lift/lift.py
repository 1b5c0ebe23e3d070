"""Toy lift model: lift(s) = 9 - (s - 3)^2, peaking at s = 3."""

import sys
from pathlib import Path

config = dict(
    line.split("=", 1)
    for line in Path(sys.argv[1]).read_text(encoding="utf-8").splitlines()
    if "=" in line
)
span = float(config["span"])
lift = 9.0 - (span - 3.0) ** 2
Path("lift.out").write_text(f"span {span!r}\nlift {lift!r}\n", encoding="utf-8")
print(f"span={span} lift={lift}")
