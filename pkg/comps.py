import sys

from metacomps.cli import main as cli_main, build_parser

if __name__ == "__main__":
    if len(sys.argv) > 1:
        raise SystemExit(cli_main())
    build_parser().print_help()
