import sys

from ammlab.cli import main

sys.exit(main())
