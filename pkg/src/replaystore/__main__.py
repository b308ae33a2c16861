import sys

from replaystore.cli import main

sys.exit(main())
