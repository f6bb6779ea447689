import sys

from mvann.cli import main

sys.exit(main())
