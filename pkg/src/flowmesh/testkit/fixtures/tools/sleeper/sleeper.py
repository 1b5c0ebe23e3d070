"""Sleep for the given number of seconds."""

import json
import sys
import time
from pathlib import Path

seconds = float(sys.argv[1])
time.sleep(seconds)
Path("outputs.json").write_text(json.dumps({"slept": seconds}), encoding="utf-8")
