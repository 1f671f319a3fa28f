"""``fedreview`` command line: partition, run, serve, client, report.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training error,
4 transport or protocol error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import threading
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import STRATEGIES, ExperimentConfig, load_config
from .errors import ConfigError, DataError, FedReviewError, TransportError
from .experiment import clients_for
from .federation import Client, FederationResult, TcpServerTransport, connect_and_participate, make_evaluator, serve
from .pipeline import PreparedData, base_model, partition, prepare_data, run_individual_tasks, run_multitask
from .reporting import collect_runs, render_report

log = logging.getLogger("fedreview")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage mistakes share the configuration exit code
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--jobs", type=int, help="parallel client training processes")
    common.add_argument("--output-dir", type=Path, help="override the configured output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="fedreview", description="Federated LoRA fine-tuning of code-review tasks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("partition", parents=[common], help="write client shards, test sets and an overlap report")

    run = sub.add_parser("run", parents=[common], help="run individual-task federation or a multi-task strategy")
    run.add_argument("--strategy", choices=STRATEGIES)
    run.add_argument("--with-central", action="store_true", help="also train one model on the pooled shards")
    run.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    run.add_argument("--listen", default="127.0.0.1:0", help="server address for --transport tcp")

    srv = sub.add_parser("serve", parents=[common], help="federation server for remote clients")
    srv.add_argument("--listen", required=True, metavar="ADDR")
    srv.add_argument("--with-central", action="store_true")

    cli = sub.add_parser("client", parents=[common], help="join a federation server as one client")
    cli.add_argument("--connect", required=True, metavar="ADDR")
    cli.add_argument("--client-id", type=int, required=True, help="which shard this process owns (0 or 1)")

    rep = sub.add_parser("report", parents=[common], help="merge finished runs into one comparison")
    rep.add_argument("directory", nargs="?", type=Path, help="directory holding run subdirectories")
    return parser


def _config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    if getattr(args, "strategy", None):
        overrides["strategy"] = args.strategy
    if getattr(args, "with_central", False):
        overrides["with_central"] = True
    return replace(cfg, **overrides) if overrides else cfg


def _run_dir(cfg: ExperimentConfig) -> Path:
    return cfg.output_dir / cfg.strategy


def cmd_partition(cfg: ExperimentConfig) -> int:
    out = cfg.output_dir / "partition"
    report = partition(cfg, out)
    for task, info in report["tasks"].items():
        overlap = sum(len(v) for v in info["overlaps"].values())
        print(f"{task}: client0={info['client0']} client1={info['client1']} test={info['test']} project overlaps={overlap}")
    print(f"wrote {out}")
    return 0


def _tcp_results(cfg: ExperimentConfig, data: PreparedData, listen: str) -> dict[str, FederationResult]:
    """Each task federated over loopback sockets with in-process client threads."""
    base = base_model(cfg)
    results = {}
    for task in cfg.tasks:
        fed = cfg.fed_config(task)
        transport = TcpServerTransport(listen, len(data.shards[task]), fed.timeout)
        errors: list[BaseException] = []

        def participate(client: Client, fed=fed, address=transport.address):
            try:
                connect_and_participate(address, client, base, fed)
            except BaseException as exc:  # surfaced after the server finishes
                errors.append(exc)

        threads = [threading.Thread(target=participate, args=(c,)) for c in clients_for(data.shards[task], data.vocab)]
        for th in threads:
            th.start()
        ckpt = _run_dir(cfg) / "checkpoints" / task
        try:
            results[task] = serve(transport, base, fed, make_evaluator({task: data.tests[task]}, data.vocab), ckpt)
        finally:
            for th in threads:
                th.join()
        if errors:
            raise errors[0]
    return results


def cmd_run(cfg: ExperimentConfig, transport: str = "inproc", listen: str = "127.0.0.1:0") -> int:
    if transport == "tcp" and cfg.strategy != "individual":
        raise ConfigError("--transport tcp supports the individual strategy only")
    data = prepare_data(cfg)
    out = _run_dir(cfg)
    if cfg.strategy == "individual":
        results = _tcp_results(cfg, data, listen) if transport == "tcp" else None
        output = run_individual_tasks(cfg, data, out, results)
    else:
        output, _ = run_multitask(cfg, data, out)
    print(output.report)
    print(f"wrote {out}")
    return 0


def cmd_serve(cfg: ExperimentConfig, listen: str) -> int:
    if cfg.strategy != "individual":
        raise ConfigError("serve supports the individual strategy only")
    data = prepare_data(cfg)
    base = base_model(cfg)
    results = {}
    for task in cfg.tasks:
        fed = cfg.fed_config(task)
        transport = TcpServerTransport(listen, len(data.shards[task]), fed.timeout)
        log.info("serving %s on %s:%d", task, *transport.address)
        ckpt = _run_dir(cfg) / "checkpoints" / task
        results[task] = serve(transport, base, fed, make_evaluator({task: data.tests[task]}, data.vocab), ckpt)
    output = run_individual_tasks(cfg, data, _run_dir(cfg), results)
    print(output.report)
    return 0


def cmd_client(cfg: ExperimentConfig, address: str, client_id: int) -> int:
    data = prepare_data(cfg)
    base = base_model(cfg)
    for task in cfg.tasks:
        shards = {s.client_id: s for s in data.shards[task]}
        if client_id not in shards:
            raise ConfigError(f"no shard for client id {client_id}; available: {sorted(shards)}")
        client = Client.from_shard(shards[client_id], data.vocab)
        connect_and_participate(address, client, base, cfg.fed_config(task))
        print(f"{task}: client {client_id} finished {cfg.rounds} rounds")
    return 0


def cmd_report(directory: Path) -> int:
    table, warnings = collect_runs(directory)
    for w in warnings:
        log.warning(w)
    text = render_report(table, warnings)
    if directory.is_dir():
        (directory / "report.md").write_bytes(text.encode("utf-8"))
    print(text)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "partition":
            return cmd_partition(cfg)
        if args.command == "run":
            return cmd_run(cfg, args.transport, args.listen)
        if args.command == "serve":
            return cmd_serve(cfg, args.listen)
        if args.command == "client":
            return cmd_client(cfg, args.connect, args.client_id)
        return cmd_report(args.directory or cfg.output_dir)
    except FedReviewError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        # unreadable inputs are data problems; socket failures are transport problems
        code = TransportError.exit_code if isinstance(exc, ConnectionError) else DataError.exit_code
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
