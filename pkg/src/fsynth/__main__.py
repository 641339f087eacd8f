import sys

from fsynth.cli import main

sys.exit(main())
