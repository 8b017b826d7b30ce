"""Command line: ``linkweave simulate|server|client``."""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import signal
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .bundle import BundleConfig
from .metrics import average_summaries, bandwidth_series, format_summary, write_trace
from .simnet.run import InvariantViolation, SimResult, run_scenario
from .simnet.scenario import ScenarioError, load_scenario
from .transport.codec import TOKEN_SIZE

log = logging.getLogger("linkweave")

EXIT_PARSE = 1
EXIT_INVARIANT = 2


def _token(text: str) -> bytes:
    try:
        token = bytes.fromhex(text)
    except ValueError:
        raise argparse.ArgumentTypeError("token must be hex") from None
    if len(token) != TOKEN_SIZE:
        raise argparse.ArgumentTypeError(f"token must be {TOKEN_SIZE} bytes ({2 * TOKEN_SIZE} hex digits)")
    return token


def write_run(result: SimResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trace.csv", "w", newline="") as f:
        write_trace(result.trace, f)
    with open(out / "bandwidth.csv", "w", newline="") as f:
        f.write("t_us,bps_100ms,bps_1000ms\n")
        for t, short, long in bandwidth_series(result.trace):
            f.write(f"{t},{short:.1f},{long:.1f}\n")
    (out / "summary.txt").write_text(format_summary(result.summary))


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"{args.scenario}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as exc:
        print(f"cannot read scenario: {exc}", file=sys.stderr)
        return EXIT_PARSE
    out = Path(args.out)
    seeds: List[Optional[int]] = list(range(1, args.repeat + 1)) if args.repeat else [None]
    summaries = []
    for i, seed in enumerate(seeds, 1):
        try:
            result = run_scenario(scenario, seed=seed, scheduler=args.scheduler, until_complete=args.until_complete)
        except InvariantViolation as exc:
            print(f"invariant violated: {exc}", file=sys.stderr)
            return EXIT_INVARIANT
        summaries.append(result.summary)
        write_run(result, out / f"run-{i:02d}" if args.repeat else out)
    if args.repeat:
        summary = average_summaries(summaries)
        (out / "summary.txt").write_text(format_summary(summary))
    else:
        summary = summaries[0]
    sys.stdout.write(format_summary(summary))
    return 0


async def _serve_forever(start, stop) -> None:
    loop = asyncio.get_running_loop()
    done = asyncio.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, done.set)
        except (NotImplementedError, RuntimeError):
            pass
    await start()
    try:
        await done.wait()
    finally:
        await stop()


def cmd_server(args: argparse.Namespace) -> int:
    from .transport.proxy import ProxyServer
    from .transport.tcp import DEFAULT_PORT, parse_addr

    try:
        host, port = parse_addr(args.listen, DEFAULT_PORT)
    except ValueError as exc:
        print(exc, file=sys.stderr)
        return EXIT_PARSE

    async def main() -> None:
        server = ProxyServer(args.token, BundleConfig(scheduler=args.scheduler))

        async def start() -> None:
            bound = await server.listen(host, port)
            log.info("listening on %s:%d", *bound)

        await _serve_forever(start, server.close)

    try:
        asyncio.run(main())
    except OSError as exc:
        print(f"cannot listen on {args.listen}: {exc}", file=sys.stderr)
        return 1
    return 0


def cmd_client(args: argparse.Namespace) -> int:
    from .transport.proxy import ProxyClient, parse_forward
    from .transport.tcp import DEFAULT_PORT, parse_addr, parse_link

    try:
        default = parse_addr(args.server, DEFAULT_PORT) if args.server else None
        links = [parse_link(text, i, default) for i, text in enumerate(args.link or ["="])]
        forwards = [parse_forward(text) for text in args.forward]
    except ValueError as exc:
        print(exc, file=sys.stderr)
        return EXIT_PARSE

    async def main() -> None:
        client = ProxyClient(args.token, links, forwards, BundleConfig(scheduler=args.scheduler))

        async def start() -> None:
            await client.start()
            for rule, bound in zip(forwards, client.listening):
                log.info("forwarding %s:%d to %s", bound[0], bound[1], rule.target)

        await _serve_forever(start, client.close)

    try:
        asyncio.run(main())
    except OSError as exc:
        print(f"startup failed: {exc}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="linkweave", description="Aggregate several network links into one reliable stream.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario file in the link simulator")
    sim.add_argument("scenario", help="scenario file")
    sim.add_argument("--repeat", type=int, default=0, metavar="N", help="run with seeds 1..N and average the summaries")
    sim.add_argument("--scheduler", choices=("edpf", "dumb"), default="edpf")
    sim.add_argument("--out", default=".", metavar="DIR", help="output directory (default: current)")
    sim.add_argument("--until-complete", action="store_true", help="keep running past the duration until every byte arrives")
    sim.set_defaults(func=cmd_simulate)

    srv = sub.add_parser("server", help="accept bundle links and forward channels")
    srv.add_argument("--listen", default="0.0.0.0:9330", metavar="ADDR")
    srv.add_argument("--token", type=_token, required=True, metavar="HEX")
    srv.add_argument("--scheduler", choices=("edpf", "dumb"), default="edpf")
    srv.set_defaults(func=cmd_server)

    cli = sub.add_parser("client", help="connect links to a server and expose forwarding listeners")
    cli.add_argument("--server", metavar="ADDR", help="server address for links that do not name one")
    cli.add_argument("--token", type=_token, required=True, metavar="HEX")
    cli.add_argument(
        "--link", action="append", metavar="[BIND]=[ADDR]",
        help="one link: local address to bind, '=', server address; repeat per interface",
    )
    cli.add_argument("--forward", action="append", default=[], metavar="[BIND:]PORT:HOST:PORT")
    cli.add_argument("--scheduler", choices=("edpf", "dumb"), default="edpf")
    cli.set_defaults(func=cmd_client)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=os.environ.get("LINKWEAVE_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    args = build_parser().parse_args(argv)
    if getattr(args, "repeat", 0) < 0:
        print("--repeat must be positive", file=sys.stderr)
        return EXIT_PARSE
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
