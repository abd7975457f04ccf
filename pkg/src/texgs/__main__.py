import sys

from texgs.cli import main

sys.exit(main())
