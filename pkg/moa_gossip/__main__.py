import sys

from .run_experiment import main

sys.exit(main())
