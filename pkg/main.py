import sys

from hcd.cli import dispatch

if __name__ == "__main__":
    sys.exit(dispatch())
