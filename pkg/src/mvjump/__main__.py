import sys

from .runner_cli import main

sys.exit(main())
