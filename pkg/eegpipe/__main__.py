import sys

from eegpipe.cli import main

sys.exit(main())
