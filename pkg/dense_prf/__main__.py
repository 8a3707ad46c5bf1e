import sys

from dense_prf.cli import main

sys.exit(main())
