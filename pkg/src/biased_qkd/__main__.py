import sys

from biased_qkd.cli import main

sys.exit(main())
