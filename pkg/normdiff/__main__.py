import sys

from normdiff.cli import main

sys.exit(main())
