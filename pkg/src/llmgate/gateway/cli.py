"""Entry points: ``llmgate-gateway`` and ``llmgate-engine``."""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from typing import Optional

import uvicorn

from ..engine.replica import make_clock
from ..engine.server import EngineServer
from ..router.pool import split_address
from ..topology import load_topology
from .app import Gateway, GatewayConfig, create_app


def gateway_main(argv: Optional[list[str]] = None) -> int:
    p = argparse.ArgumentParser(prog="llmgate-gateway", description="OpenAI-compatible gateway")
    p.add_argument("--config", required=True, help="gateway YAML/JSON config")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--log-level", default="warning")
    args = p.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    cfg = GatewayConfig.load(args.config)
    if args.host:
        cfg.host = args.host
    if args.port is not None:
        cfg.port = args.port
    app = create_app(Gateway.from_config(cfg))
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level=args.log_level, access_log=False)
    return 0


async def _serve_engines(topology_path: str, replica_ids: list[str], clock: str, min_output: Optional[int]) -> None:
    topo = load_topology(topology_path)
    chosen = [r for r in topo.replicas if not replica_ids or r.replica_id in replica_ids]
    if not chosen:
        raise SystemExit(f"no replicas matched {replica_ids}")
    servers = []
    for r in chosen:
        if not r.address:
            raise SystemExit(f"replica {r.replica_id} has no address in {topology_path}")
        host, port = split_address(r.address)
        srv = EngineServer(r, host, port, clock=make_clock(clock), min_output_tokens=min_output)
        await srv.start()
        servers.append(srv)
        print(f"engine {r.replica_id} ({r.label}) on {srv.address}", flush=True)
    try:
        await asyncio.Event().wait()
    finally:
        for s in servers:
            await s.close()


def engine_main(argv: Optional[list[str]] = None) -> int:
    p = argparse.ArgumentParser(prog="llmgate-engine", description="Simulated engine replica server(s)")
    p.add_argument("--topology", required=True)
    p.add_argument("--replica", action="append", default=[], help="replica id to serve (repeatable; default all)")
    p.add_argument("--clock", choices=("wall", "virtual"), default="wall")
    p.add_argument("--min-output-tokens", type=int)
    p.add_argument("--log-level", default="warning")
    args = p.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper())
    try:
        asyncio.run(_serve_engines(args.topology, args.replica, args.clock, args.min_output_tokens))
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(gateway_main())
