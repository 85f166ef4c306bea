import sys

from arow.cli import main

sys.exit(main())
