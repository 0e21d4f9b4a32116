import sys

from kgans.cli import main

sys.exit(main())
