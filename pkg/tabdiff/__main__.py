import sys

from tabdiff.cli import main

sys.exit(main())
