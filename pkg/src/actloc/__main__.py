"""``python -m actloc``."""
import sys

from actloc.cli import main

sys.exit(main())
