import sys

from dcaug.harness.cli import main

sys.exit(main())
