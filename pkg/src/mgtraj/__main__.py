import sys

from mgtraj.cli import main

sys.exit(main())
