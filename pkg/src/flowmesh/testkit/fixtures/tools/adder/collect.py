import json
from pathlib import Path

total = float(Path("result.txt").read_text(encoding="utf-8"))
Path("outputs.json").write_text(json.dumps({"sum": total}), encoding="utf-8")
