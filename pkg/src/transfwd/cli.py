"""Command line entry point.

Exit status is 0 on success, 2 on usage errors and 1 on runtime failures.
Every command that writes files also writes ``<output>.manifest.json`` with
versions, a hash of the effective configuration and hashes of all inputs.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import platform
import random
import sys
import tempfile
from collections import Counter
from importlib import resources
from pathlib import Path

from . import __version__
from .auth import AuthServer, ZoneConfig, benchmark
from .classify import Expectation, classify_log, load_classified, to_csv, to_jsonl
from .scan import (
    DEFAULT_PORTS, DEFAULT_TIMEOUT, KeyAllocator, LogWriter, ScanError, ScanLog, load_targets,
    record_to_json, run_scan,
)

log = logging.getLogger("transfwd")

ENV_OVERRIDES = {
    "serve-auth": {"bind": "TRANSFWD_AUTH_BIND"},
    "sensor": {"recv": "TRANSFWD_SENSOR_RECV", "send": "TRANSFWD_SENSOR_SEND"},
}


# one socket per port in live mode, so keep the default pool small
LIVE_PORTS = (32768, 33279)


class UsageError(Exception):
    pass


# files

def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"cannot read {path}: no such file")
    return p


def bundled_topology(name: str) -> Path:
    """A topology path, or the name of one shipped with the package."""
    p = Path(name)
    if p.is_file():
        return p
    ref = resources.files("transfwd").joinpath("data/topologies", p.name)
    if ref.is_file():
        return Path(str(ref))
    raise FileNotFoundError(f"cannot read {name}: no such file")


def manifest(args, inputs: dict[str, Path], outputs: list[Path]) -> dict:
    config = {k: v for k, v in sorted(vars(args).items())
              if k not in ("func", "config") and not callable(v)}
    blob = json.dumps(config, sort_keys=True, default=str)
    return {
        "tool": "transfwd",
        "version": __version__,
        "python": platform.python_version(),
        "platform": platform.platform(),
        "command": args.command,
        "config": json.loads(blob),
        "config_sha256": hashlib.sha256(blob.encode()).hexdigest(),
        "inputs": {k: {"path": str(p), "sha256": file_hash(p)} for k, p in inputs.items()},
        "outputs": {str(p): file_hash(p) for p in outputs if p.exists()},
    }


def write_manifest(args, primary, inputs: dict, outputs: list) -> None:
    target = Path(args.manifest) if args.manifest else Path(f"{primary}.manifest.json")
    write_atomic(target, json.dumps(manifest(args, inputs, [Path(o) for o in outputs]),
                                    indent=2, sort_keys=True) + "\n")


def port_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in text.split("-"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO-HI, got {text!r}") from None
    if not 0 < lo <= hi <= 65535:
        raise argparse.ArgumentTypeError(f"bad port range {text!r}")
    return lo, hi


# commands

def _sim_endpoint(args):
    from .netsim import Network, Role, SimTopology
    path = bundled_topology(args.topology)
    topo = SimTopology.load(path)
    scanner = args.scanner or next((n.id for n in topo.by_role(Role.SCANNER)), None)
    if scanner is None:
        raise ValueError(f"{path}: no Scanner node")
    net = Network(topo, seed=args.seed)
    return net, net.endpoint(scanner), path


def _mode(args) -> None:
    if args.live and args.topology:
        raise UsageError("--live and --topology are mutually exclusive")
    if not args.live and not args.topology:
        raise UsageError(f"{args.command} needs --topology (simulation) or --live")
    if args.live and not args.source:
        raise UsageError("--live needs --source")


def cmd_scan(args) -> int:
    _mode(args)
    if args.classified and not args.control_ip:
        raise UsageError("--classified needs --control-ip")
    targets_path = require_file(args.targets)
    targets = load_targets(targets_path)
    inputs = {"targets": targets_path}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(f".{out.name}.partial")
    if args.port_range is None:
        args.port_range = LIVE_PORTS if args.live else DEFAULT_PORTS
    if args.live:
        from .transport import UdpSocketIO
        lo, hi = args.port_range
        io = UdpSocketIO(args.source, range(lo, hi + 1))
    else:
        net, io, topo_path = _sim_endpoint(args)
        inputs["topology"] = topo_path
    allocator = KeyAllocator(args.port_range, hold=args.timeout + args.grace,
                             rng=random.Random(args.seed))
    try:
        with open(tmp, "w") as fh:
            try:
                scan = run_scan(io, targets, args.qname, rate=args.rate, timeout=args.timeout,
                                allocator=allocator, sink=LogWriter(fh), grace=args.grace,
                                port=args.dns_port)
            except ScanError as exc:
                raise RuntimeError(f"{exc}; partial log kept at {tmp}") from exc
    finally:
        if args.live:
            io.close()
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in _records(scan))
    write_atomic(out, text)
    tmp.unlink()
    outputs = [out]
    if args.classified:
        exp = Expectation(args.control_ip, args.qname, args.relaxed)
        _write_classified(args.classified, classify_log(scan, exp, args.timeout))
        outputs.append(Path(args.classified))
    write_manifest(args, out, inputs, outputs)
    print(f"{len(scan.probes)} probes, {len(scan.responses)} responses -> {out}")
    return 0


def _records(scan: ScanLog):
    return (record_to_json(r) for r in scan.records())


def _write_classified(path, classified) -> None:
    text = to_jsonl(classified) if str(path).endswith((".jsonl", ".json")) else to_csv(classified)
    write_atomic(path, text)


def _summary(classified) -> str:
    counts = Counter(c.cls.value for c in classified)
    return ", ".join(f"{k}={counts[k]}" for k in sorted(counts))


def cmd_classify(args) -> int:
    src = require_file(args.log)
    scan = ScanLog.load(src)
    exp = Expectation(args.control_ip, args.qname, args.relaxed)
    classified = classify_log(scan, exp, args.timeout)
    _write_classified(args.out, classified)
    write_manifest(args, args.out, {"log": src}, [args.out])
    print(_summary(classified))
    return 0


def cmd_serve_auth(args) -> int:
    cfg = ZoneConfig(args.zone, args.control_ip, args.ttl, args.bind, args.port)
    if args.benchmark:
        rate = benchmark(cfg, args.benchmark)
        print(f"{rate:.0f} responses/s over {args.benchmark} queries")
        return 0
    server = AuthServer(cfg, workers=args.workers)
    log.info("serving %s on %s:%d", cfg.zone, cfg.bind_addr, cfg.port)
    try:
        server.serve(args.duration)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    print(f"answered {server.answered} queries")
    return 0


def cmd_sensor(args) -> int:
    from .sensors import SensorConfig, build_sensor, serve_live
    if args.live:
        from .transport import RawSocketIO
        cfg = SensorConfig(args.kind, args.recv, args.upstream, args.send, args.rate_window)
        addrs = list(dict.fromkeys([cfg.recv_addr, cfg.send_addr]))
        io = RawSocketIO("0.0.0.0", listen=[53])
        try:
            serve_live(build_sensor(cfg), io, addrs, args.duration)
        finally:
            io.close()
        return 0
    from .netsim.scenario import probe_sensor, sensor_lab
    send = args.send if args.kind == 2 else None
    topo = sensor_lab(args.kind, args.recv, send, args.upstream, args.rate_window)
    answers = probe_sensor(topo, "scanner", args.probes, args.span, seed=args.seed)
    sources = sorted({src for _, src in answers})
    report = {"kind": args.kind, "probes": args.probes, "span_s": args.span,
              "answers": len(answers), "answer_sources": sources}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        write_atomic(args.out, text)
        write_manifest(args, args.out, {}, [args.out])
    print(text, end="")
    return 0


def cmd_dnsroute(args) -> int:
    from .dnsroute import annotate_asns, dump_paths, infer_relationships, sanitize, trace_many
    _mode(args)
    hitlist = require_file(args.hitlist)
    targets = load_targets(hitlist)
    inputs = {"hitlist": hitlist}
    if args.live:
        from .transport import RawSocketIO
        io = RawSocketIO(args.source)
    else:
        net, io, topo_path = _sim_endpoint(args)
        inputs["topology"] = topo_path
    table = None
    if args.prefix2asn:
        from .analysis.geo import PrefixTable
        inputs["prefix2asn"] = require_file(args.prefix2asn)
        table = PrefixTable.load(args.prefix2asn)
    rng = random.Random(args.seed)
    paths = []
    try:
        for _ in range(args.repeats):
            paths += trace_many(io, targets, args.qname, args.max_ttl, args.gap_limit,
                                args.probe_timeout, args.match, rng)
    finally:
        if args.live:
            io.close()
    if table is not None:
        paths = [annotate_asns(p, table.lookup) for p in paths]
    clean = sanitize(paths, args.repeats)
    out = Path(args.out)
    write_atomic(out, _paths_text(paths, dump_paths))
    outputs = [out]
    if args.sanitized:
        write_atomic(args.sanitized, _paths_text(clean, dump_paths))
        outputs.append(Path(args.sanitized))
    if args.relationships:
        if table is None:
            raise UsageError("--relationships needs --prefix2asn")
        edges = infer_relationships(clean, table.lookup)
        write_atomic(args.relationships, "provider,customer\n"
                     + "".join(f"{a},{b}\n" for a, b in edges))
        outputs.append(Path(args.relationships))
    write_manifest(args, out, inputs, outputs)
    print(f"{len(paths)} traces, {len(clean)} sanitized -> {out}")
    return 0


def _paths_text(paths, dump) -> str:
    import io
    buf = io.StringIO()
    dump(paths, buf)
    return buf.getvalue()


def cmd_analyze(args) -> int:
    from .analysis import reports as R
    from .analysis.geo import GeoMaps
    inputs = {"classified": require_file(args.classified),
              "prefix2asn": require_file(args.prefix2asn),
              "asn2country": require_file(args.asn2country)}
    if args.projects:
        inputs["projects"] = require_file(args.projects)
    if args.reference:
        inputs["reference"] = require_file(args.reference)
    maps = GeoMaps.load(args.prefix2asn, args.asn2country, args.projects)
    classified = load_classified(args.classified)
    outdir = Path(args.outdir)
    cdf = R.country_cdf(classified, maps)
    shares = R.resolver_shares(classified, maps)
    indirect = R.indirect_consolidation(classified, maps)
    pop = R.prefix_population(classified)
    files = {
        "country_cdf.csv": R.cdf_csv(cdf),
        "resolver_shares.csv": R.shares_csv(shares),
        "indirect_consolidation.csv": R.indirect_csv(indirect),
        "prefix_population.csv": R.population_csv(pop),
    }
    ranking = None
    if args.reference:
        ranking = R.rank_countries(R.odns_counts(classified, maps), R.load_counts(args.reference))
        files["country_ranking.csv"] = R.ranking_csv(R.format_ranking(ranking, args.top))
    files["long_format.csv"] = R.long_format(cdf, shares, indirect, ranking, pop)
    for name, text in files.items():
        write_atomic(outdir / name, text)
    write_manifest(args, outdir / "analysis", inputs, [outdir / n for n in files])
    print(f"{len(files)} reports -> {outdir}")
    return 0


def cmd_simulate(args) -> int:
    from .netsim import SimTopology, run_scenario
    path = bundled_topology(args.topology)
    topo = SimTopology.load(path)
    inputs = {"topology": path}
    script = args.scenario
    if Path(script).is_file():
        inputs["scenario"] = Path(script)
    res = run_scenario(topo, script, seed=args.seed, qname=args.qname, relaxed=args.relaxed,
                       timeout=args.timeout)
    outdir = Path(args.outdir)
    files = {"trace.jsonl": res.trace_jsonl()}
    for i, (scan, classified) in enumerate(zip(res.scans, res.classified)):
        files[f"scan_{i}.jsonl"] = "".join(json.dumps(r, sort_keys=True) + "\n"
                                           for r in _records(scan))
        files[f"classified_{i}.csv"] = to_csv(classified)
        print(f"scan {i}: {_summary(classified)}")
        for c in classified:
            print(f"  {c.target:<15} {c.cls.value:<21} responder={c.responder} "
                  f"resolver={c.resolver_hint}")
    if res.traces:
        from .dnsroute import dump_paths
        files["dnsroute.jsonl"] = _paths_text(res.traces, dump_paths)
    for name, text in files.items():
        write_atomic(outdir / name, text)
    write_manifest(args, outdir / "simulate", inputs, [outdir / n for n in files])
    sent, done = res.network.conservation()
    print(f"{sent} packets, outcomes {dict(sorted(res.network.outcomes.items()))} -> {outdir}")
    return 0


# parser

def _add_mode(p) -> None:
    g = p.add_argument_group("mode")
    g.add_argument("--topology", help="simulate on this topology file (or bundled name)")
    g.add_argument("--scanner", help="scanner node id in the topology")
    g.add_argument("--live", action="store_true", help="use live sockets (needs privileges)")
    g.add_argument("--source", help="local address for --live")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file; section per command, [DEFAULT] for all")
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--manifest", help="run manifest path (default: next to the output)")
    common.add_argument("--seed", type=int, default=0)

    parser = argparse.ArgumentParser(prog="transfwd",
                                     description="Find and classify transparent DNS forwarders.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("scan", parents=[common], help="transactional DNS scan")
    p.add_argument("--targets", required=True, help="file with one IPv4 address per line")
    p.add_argument("--qname", required=True)
    p.add_argument("--rate", type=float, default=1000.0, help="probes per second")
    p.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT)
    p.add_argument("--grace", type=float, default=5.0, help="extra key hold after timeout")
    p.add_argument("--port-range", type=port_range,
                   help="client ports LO-HI (default 32768-60999 simulated, 32768-33279 live)")
    p.add_argument("--dns-port", type=int, default=53)
    p.add_argument("--out", required=True, help="transaction log (JSONL)")
    p.add_argument("--classified", help="also classify into this CSV/JSONL")
    p.add_argument("--control-ip")
    p.add_argument("--relaxed", action="store_true", help="accept a single A record")
    _add_mode(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("classify", parents=[common], help="classify a transaction log")
    p.add_argument("--log", required=True)
    p.add_argument("--control-ip", required=True)
    p.add_argument("--qname")
    p.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT)
    p.add_argument("--relaxed", action="store_true")
    p.add_argument("--out", required=True, help=".csv or .jsonl")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("serve-auth", parents=[common], help="mirroring authoritative server")
    p.add_argument("--zone", required=True)
    p.add_argument("--control-ip", required=True)
    p.add_argument("--ttl", type=int, default=60)
    p.add_argument("--bind", default="0.0.0.0", help="env TRANSFWD_AUTH_BIND")
    p.add_argument("--port", type=int, default=53)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--duration", type=float, help="stop after this many seconds")
    p.add_argument("--benchmark", type=int, metavar="N",
                   help="measure in-process throughput over N queries and exit")
    p.set_defaults(func=cmd_serve_auth)

    p = sub.add_parser("sensor", parents=[common], help="honeypot sensor (simulated unless --live)")
    p.add_argument("--kind", type=int, choices=[1, 2, 3], required=True)
    p.add_argument("--recv", default="192.0.2.11", help="env TRANSFWD_SENSOR_RECV")
    p.add_argument("--send", help="kind 2 answer address; env TRANSFWD_SENSOR_SEND")
    p.add_argument("--upstream", default="8.8.8.8")
    p.add_argument("--rate-window", type=float, default=300.0)
    p.add_argument("--live", action="store_true")
    p.add_argument("--duration", type=float, help="live: stop after this many seconds")
    p.add_argument("--probes", type=int, default=10, help="simulation: queries to send")
    p.add_argument("--span", type=float, default=1800.0, help="simulation: seconds to spread them over")
    p.add_argument("--out", help="simulation report (JSON)")
    p.set_defaults(func=cmd_sensor)

    p = sub.add_parser("dnsroute", parents=[common], help="DNSRoute++ path tracing")
    p.add_argument("--hitlist", required=True)
    p.add_argument("--qname", required=True)
    p.add_argument("--max-ttl", type=int, default=64)
    p.add_argument("--gap-limit", type=int, default=5)
    p.add_argument("--probe-timeout", type=float, default=2.0)
    p.add_argument("--repeats", type=int, default=2)
    p.add_argument("--match", choices=["quote", "timing"], default="quote")
    p.add_argument("--prefix2asn", help="annotate hops with ASNs")
    p.add_argument("--out", required=True, help="all traces (JSONL)")
    p.add_argument("--sanitized", help="sanitized traces (JSONL)")
    p.add_argument("--relationships", help="inferred provider,customer edges (CSV)")
    _add_mode(p)
    p.set_defaults(func=cmd_dnsroute)

    p = sub.add_parser("analyze", parents=[common], help="country, resolver and prefix reports")
    p.add_argument("--classified", required=True)
    p.add_argument("--prefix2asn", required=True)
    p.add_argument("--asn2country", required=True)
    p.add_argument("--projects", help="projects INI (default: bundled snapshot)")
    p.add_argument("--reference", help="reference per-country counts CSV for the ranking")
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", parents=[common], help="run a scenario in the simulator")
    p.add_argument("--topology", required=True, help="topology file or bundled name")
    p.add_argument("--scenario", default="probe-all", help="probe-all or a script file")
    p.add_argument("--qname")
    p.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT)
    p.add_argument("--relaxed", action="store_true")
    p.add_argument("--outdir", default="sim-out")
    p.set_defaults(func=cmd_simulate)
    return parser


def _peek(parser, argv) -> tuple[str | None, str | None]:
    """(command, config path) without enforcing required options."""
    names = set(_subparser_map(parser))
    command = next((a for a in argv if a in names), None)
    config = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif a.startswith("--config="):
            config = a.split("=", 1)[1]
    return command, config


def _subparser_map(parser) -> dict:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def _apply_config(parser, argv) -> None:
    """Config file values, then environment overrides, become defaults."""
    command, config = _peek(parser, argv)
    if command is None:
        return
    sp = _subparser_map(parser)[command]
    actions = {a.dest: a for a in sp._actions}
    values: dict = {}
    if config:
        cp = configparser.ConfigParser()
        path = require_file(config)
        with open(path) as fh:
            cp.read_file(fh)
        section = cp[command] if cp.has_section(command) else cp.defaults()
        for key, raw in section.items():
            dest = key.replace("-", "_")
            if dest not in actions:
                raise UsageError(f"{config}: unknown option {key!r} for {command}")
            values[dest] = raw
    for dest, var in ENV_OVERRIDES.get(command, {}).items():
        if os.environ.get(var):
            values[dest] = os.environ[var]
    converted = {}
    for dest, raw in values.items():
        act = actions[dest]
        if isinstance(act, argparse._StoreTrueAction):
            converted[dest] = raw.strip().lower() in ("1", "true", "yes", "on")
        else:
            try:
                converted[dest] = act.type(raw) if act.type is not None else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{config or 'environment'}: {dest}: {exc}") from None
        act.required = False
    sp.set_defaults(**converted)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"transfwd: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, configparser.Error) as exc:
        print(f"transfwd: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    # live scans use ordinary UDP sockets; spoofing and raw ICMP need more
    if getattr(args, "live", False) and args.command in ("sensor", "dnsroute"):
        from .transport import PrivilegeError, require_raw_sockets
        try:
            require_raw_sockets()
        except PrivilegeError as exc:
            print(f"transfwd: error: {exc}", file=sys.stderr)
            return 1
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"transfwd: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"transfwd: error: {exc}", file=sys.stderr)
        log.debug("failure", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
