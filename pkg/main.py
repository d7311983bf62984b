import sys
from typing import List, Optional

from cli import cli


def cli_main(argv: Optional[List[str]] = None) -> int:
    """Run the command line and return its exit status instead of exiting."""
    try:
        cli.main(args=argv, prog_name="loracomp", standalone_mode=True)
    except SystemExit as e:
        if e.code is None:
            return 0
        return e.code if isinstance(e.code, int) else 1
    return 0


if __name__ == "__main__":
    sys.exit(cli_main())
