import sys

from sqlab.cli import main

sys.exit(main())
