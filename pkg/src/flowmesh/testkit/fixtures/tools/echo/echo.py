"""Copy the message input to the echoed output."""

import json
from pathlib import Path

inputs = json.loads(Path("tool_inputs.json").read_text(encoding="utf-8"))
message = inputs["message"]["value"]
print(message)
Path("outputs.json").write_text(json.dumps({"echoed": message}), encoding="utf-8")
