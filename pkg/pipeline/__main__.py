"""Allow running as: python -m pipeline <command>"""

import sys

from pipeline.run import main

sys.exit(main())
