import argparse
import sys

from .models import OBJECTIVES
from .serve import serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="nb-runner")
    parser.add_argument("--mode", choices=("dummy", "linear"), default="dummy")
    parser.add_argument("--objectives", default=None,
                        help="comma-separated subset of supported objectives")
    parser.add_argument("--deviation", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="recipe deviation to declare (e.g. lr=1e-5)")
    args = parser.parse_args(argv)
    objectives = (args.objectives.split(",") if args.objectives
                  else list(OBJECTIVES))
    deviations = {}
    for item in args.deviation:
        key, _, value = item.partition("=")
        try:
            deviations[key] = float(value)
        except ValueError:
            deviations[key] = value
    serve(mode=args.mode, objectives=objectives, deviations=deviations)
    return 0


if __name__ == "__main__":
    sys.exit(main())
