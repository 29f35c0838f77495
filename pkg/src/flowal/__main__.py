import sys

from flowal.cli import main

sys.exit(main())
