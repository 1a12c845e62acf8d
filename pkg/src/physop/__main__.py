from physop.cli import main
import sys

sys.exit(main())
