import sys

from connav.cli import main

sys.exit(main())
