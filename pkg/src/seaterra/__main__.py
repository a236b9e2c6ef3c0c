import sys

from seaterra.cli import main

sys.exit(main())
