"""Run the 2D breaking-dam scene and report volume preservation.

Usage: python scripts/run_dam.py [out_dir] [--band R] [--frames N]
"""
import argparse
import sys

from cellflow import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", nargs="?", default="out/dam")
    parser.add_argument("--band", type=int, default=None)
    parser.add_argument("--frames", type=int, default=300)
    args = parser.parse_args()

    argv = ["run", "dam", "--out", args.out, "--frames", str(args.frames)]
    if args.band:
        argv += ["--band", str(args.band)]
    code = cli.main(argv)
    if code == 0:
        code = cli.main(["volume", args.out])
    return code


if __name__ == "__main__":
    sys.exit(main())
