import sys

from fedsim.blazebench.cli import main

sys.exit(main())
