import sys

from rml.cli import main

sys.exit(main())
