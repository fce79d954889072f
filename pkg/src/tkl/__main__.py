import sys

from tkl.cli import main

sys.exit(main())
