import sys

from dpdme.cli import main

sys.exit(main())
