import sys

from glacier.cli import main

sys.exit(main())
