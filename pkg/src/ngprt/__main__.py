import sys

from ngprt.cli import main

sys.exit(main())
