import sys

from ppltape.cli import main

sys.exit(main())
