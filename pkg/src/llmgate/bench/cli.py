"""``bench`` command line: run, sweep, import-openorca."""

from __future__ import annotations

import argparse
import asyncio
import logging
import re
import signal
import sys
from pathlib import Path
from typing import Optional

from .dataset import DatasetError, convert_openorca
from .report import emit_report, to_long_csv
from .runner import BenchmarkRun, EndpointUnreachableError, run_benchmark, sweep

EXIT_OK = 0
EXIT_ENDPOINT = 1
EXIT_USAGE = 2
EXIT_INTERRUPTED = 130


def parse_duration(text: str) -> float:
    """'60s', '0.6s', '500ms', '2m' or a bare number of seconds."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*(ms|s|m)?\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(f"bad duration {text!r}")
    value, unit = float(m.group(1)), m.group(2) or "s"
    seconds = value / 1000 if unit == "ms" else value * 60 if unit == "m" else value
    if seconds <= 0:
        raise argparse.ArgumentTypeError("duration must be > 0")
    return seconds


def parse_concurrencies(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad concurrency list {text!r}") from None
    if any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("concurrencies must be >= 1")
    return values


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--endpoint", required=True, help="gateway base URL, or sim://1xTP8 | sim://dynamic | sim://topology.yaml")
    p.add_argument("--dataset", help="line-delimited JSON with {system, question}")
    p.add_argument("--api-key", help="bearer key for the gateway")
    p.add_argument("--stream", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--timeout", type=parse_duration, default=60.0)
    p.add_argument("--max-tokens", type=int, default=512)
    p.add_argument("--min-output-tokens", type=int, help="sim only: draw output lengths in [min, max-tokens]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", default="llmgate-sim")
    p.add_argument("--out", help="output directory (default: stdout)")
    p.add_argument("--format", choices=("json", "csv", "table"), default="table")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description="Closed-loop LLM serving benchmark")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="one run at a fixed concurrency")
    _common(run)
    run.add_argument("--concurrency", "-c", type=int, required=True)
    run.add_argument("--total-requests", type=int, help="override the default of 20 x concurrency")

    sw = sub.add_parser("sweep", help="one run per concurrency level")
    _common(sw)
    sw.add_argument("--concurrencies", type=parse_concurrencies, required=True)
    sw.add_argument("--cooldown", type=parse_duration, default=1.0)

    imp = sub.add_parser("import-openorca", help="convert OpenOrca JSON lines to the harness format")
    imp.add_argument("src")
    imp.add_argument("dst")
    imp.add_argument("--limit", type=int)
    return parser


def _base_run(args: argparse.Namespace, concurrency: int, total: Optional[int] = None) -> BenchmarkRun:
    return BenchmarkRun(
        concurrency=concurrency,
        endpoint=args.endpoint,
        total_requests=total,
        dataset=args.dataset,
        api_key=args.api_key,
        timeout=args.timeout,
        stream=args.stream,
        seed=args.seed,
        max_tokens=args.max_tokens,
        model=args.model,
        min_output_tokens=args.min_output_tokens,
    )


async def _run_with_interrupt(run: BenchmarkRun):
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    try:
        loop.add_signal_handler(signal.SIGINT, stop.set)
    except (NotImplementedError, RuntimeError):
        pass
    try:
        return await run_benchmark(run, stop)
    finally:
        try:
            loop.remove_signal_handler(signal.SIGINT)
        except (NotImplementedError, RuntimeError):
            pass


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.cmd == "import-openorca":
        try:
            n = convert_openorca(args.src, args.dst, args.limit)
        except (OSError, DatasetError) as e:
            print(f"bench: {e}", file=sys.stderr)
            return EXIT_USAGE
        print(f"wrote {n} records to {args.dst}")
        return EXIT_OK

    try:
        if args.cmd == "run":
            run = _base_run(args, args.concurrency, args.total_requests)
            try:
                report = asyncio.run(_run_with_interrupt(run))
            except EndpointUnreachableError as e:
                print(f"bench: {e.args[0]}", file=sys.stderr)
                return EXIT_ENDPOINT
            reports = [report]
        else:
            base = _base_run(args, args.concurrencies[0] if args.concurrencies else 1)
            reports = asyncio.run(sweep(args.concurrencies, base, cooldown=args.cooldown))
    except (OSError, DatasetError, ValueError) as e:
        print(f"bench: {e}", file=sys.stderr)
        return EXIT_USAGE

    path = emit_report(reports, args.format, args.out)
    if args.cmd == "sweep" and args.out:
        (Path(args.out) / "sweep_long.csv").write_text(to_long_csv(reports))
    if path is not None:
        print(f"report written to {path}")
    if any(r.interrupted for r in reports):
        return EXIT_INTERRUPTED
    if any(r.error and "unreachable" in r.error for r in reports):
        return EXIT_ENDPOINT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
