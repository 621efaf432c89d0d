import sys

from faith.cli import main

sys.exit(main())
