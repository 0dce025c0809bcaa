import sys

from pdcguard.cli import main

sys.exit(main())
