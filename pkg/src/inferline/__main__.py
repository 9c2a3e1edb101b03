import sys

from inferline.cli import main

sys.exit(main())
