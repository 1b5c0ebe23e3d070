"""Exit with the requested code without writing outputs."""

import sys

code = int(sys.argv[1])
print("about to fail")
print(f"failing with exit code {code}", file=sys.stderr)
sys.exit(code)
