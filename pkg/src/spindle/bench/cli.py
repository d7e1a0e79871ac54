"""``bench`` command line.

    bench corpus --n 1000 --width 256 --height 256 --seed 0 --out /tmp/corpus
    bench run --config sweep.conf --out results.json
    bench baseline --config sweep.conf --out baseline.json
    bench report --input results.json --format csv --out results.csv

Exit codes: 0 on success, 2 for usage or configuration errors, 3 when a run
fails at runtime.
"""

from __future__ import annotations

import argparse
import logging
import sys

from ..netsim import gen_corpus
from .config import BenchConfig, ConfigError
from .report import FORMATS, emit_report, load_report, render
from .runner import BenchReport, run_baseline_sequential, run_benchmark

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bench", description="Pipeline benchmark harness.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("corpus", help="generate a deterministic PPM corpus")
    c.add_argument("--n", type=int, required=True, help="number of images")
    c.add_argument("--width", type=int, default=256)
    c.add_argument("--height", type=int, default=256)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True, help="output directory")

    for name, text in (("run", "concurrency sweep"), ("baseline", "sequential and passthrough bounds")):
        r = sub.add_parser(name, help=text)
        r.add_argument("--config", required=True, help="flat key=value config file")
        r.add_argument("--out", help="write the report here (default: print a summary only)")
        r.add_argument("--format", choices=FORMATS, default="json")

    rep = sub.add_parser("report", help="convert a JSON report")
    rep.add_argument("--input", required=True, help="JSON report written by 'bench run'")
    rep.add_argument("--format", choices=FORMATS, required=True)
    rep.add_argument("--out", help="output path (default: stdout)")
    return p


def _print_summary(report: BenchReport) -> None:
    for s in report.summary():
        print(
            f"{s['workload']:<12} {s['executor']:<16} c={s['concurrency']:<3} "
            f"items/s min={s['throughput_min']:.1f} med={s['throughput_median']:.1f} "
            f"max={s['throughput_max']:.1f}  ttfb_us med={s['ttfb_us_median']:.0f}"
        )
    for d in report.ttfb_deltas():
        mark = "subprocess slower" if d["flagged"] else "subprocess NOT slower"
        print(f"ttfb delta c={d['concurrency']}: {d['delta_us']:+.0f}us ({mark})")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        if args.command == "corpus":
            if args.n < 1 or args.width < 1 or args.height < 1:
                print("bench: error: --n, --width and --height must be positive", file=sys.stderr)
                return EXIT_USAGE
            m = gen_corpus(args.out, args.n, args.width, args.height, args.seed)
            print(m.path)
            return EXIT_OK

        if args.command == "report":
            report = load_report(args.input)
            if args.out:
                emit_report(report, args.format, args.out)
            else:
                sys.stdout.write(render(report, args.format))
            return EXIT_OK

        try:
            config = BenchConfig.load(args.config)
        except OSError as exc:
            print(f"bench: error: cannot read config: {exc}", file=sys.stderr)
            return EXIT_USAGE
        run = run_benchmark if args.command == "run" else run_baseline_sequential
        report = run(config)
        _print_summary(report)
        if args.out:
            emit_report(report, args.format, args.out)
        return EXIT_OK
    except ConfigError as exc:
        print(f"bench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        logging.getLogger("bench").debug("run failed", exc_info=True)
        print(f"bench: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
