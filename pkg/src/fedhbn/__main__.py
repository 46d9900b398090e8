import sys

from fedhbn.cli import main

sys.exit(main())
