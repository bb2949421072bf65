import sys

from nvt.cli import main

sys.exit(main())
