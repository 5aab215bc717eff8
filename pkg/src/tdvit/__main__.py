import sys

from tdvit.cli import main

sys.exit(main())
