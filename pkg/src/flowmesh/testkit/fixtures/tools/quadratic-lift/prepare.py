"""Turn the engine inputs into the solver's key=value config file."""

import json
from pathlib import Path

inputs = json.loads(Path("tool_inputs.json").read_text(encoding="utf-8"))
span = inputs["span"]["value"]
Path("wing.cfg").write_text(f"span={span!r}\n", encoding="utf-8")
