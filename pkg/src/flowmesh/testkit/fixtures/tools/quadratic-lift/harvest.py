"""Read the solver output back into engine outputs."""

import json
from pathlib import Path

values = dict(
    line.split(" ", 1)
    for line in Path("lift.out").read_text(encoding="utf-8").splitlines()
)
outputs = {"lift": float(values["lift"]), "report": {"path": "lift.out"}}
Path("outputs.json").write_text(json.dumps(outputs), encoding="utf-8")
