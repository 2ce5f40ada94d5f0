import sys

from prefleak.cli import main

sys.exit(main())
