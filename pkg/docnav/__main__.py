import sys

from docnav.cli import main

sys.exit(main())
