import sys

from hetdistill.cli import main

sys.exit(main())
