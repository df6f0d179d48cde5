import sys

from gridloop.cli import main

sys.exit(main())
