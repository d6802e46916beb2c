"""Command line entry point: ``conewave <command> ...``.

Every command writes its outputs plus a manifest into ``--out``.  Options
may come from a JSON config file (``--config``); flags given on the command
line win.

Exit codes: 0 success, 1 an assumption check failed, 2 runtime error,
64 usage error, malformed config or missing input file.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import platform
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__

EX_OK, EX_FAIL, EX_ERROR, EX_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _floats(text: str, n: int | tuple, name: str) -> list[float]:
    try:
        vals = [float(v) for v in str(text).split(",")]
    except ValueError:
        raise UsageError(f"--{name}: expected comma separated numbers, got {text!r}") from None
    ok = (len(vals) in n) if isinstance(n, tuple) else len(vals) == n
    if not ok:
        raise UsageError(f"--{name}: expected {n} values, got {len(vals)}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="conewave", description="Cone surfaces, diffractive geodesics and wave experiments.")
    p.add_argument("--version", action="version", version=f"conewave {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="numba worker threads")
    common.add_argument("--out", default="conewave-out", help="output directory")
    common.add_argument("--config", default=None, help="JSON file of option values; flags win")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sc = sub.add_parser("scene", help="validate or double a scene file", parents=[common])
    sc.add_argument("action", nargs="?", choices=["validate", "double"])
    sc.add_argument("file", nargs="?")
    sc.add_argument("-o", "--output", default=None, help="surface file to write (double)")
    sc.add_argument("--drop-straight", action="store_true", help="remove vertices with interior angle pi")

    tr = sub.add_parser("trace", help="trace geodesic chains", parents=[common])
    tr.add_argument("surface", nargs="?")
    tr.add_argument("--start", required=False, default=None, help="x,y,theta,sheet")
    tr.add_argument("--policy", default="geometric", help="geometric | fan:k | stop")
    tr.add_argument("--horizon", type=float, default=None)
    tr.add_argument("--cap", type=int, default=100000)

    ck = sub.add_parser("check", help="check the assumptions", parents=[common])
    ck.add_argument("surface", nargs="?")
    ck.add_argument("--assumption", default="all", choices=["all", "1", "2", "3"])
    ck.add_argument("--horizon", type=float, default=None, help="escape horizon (1), segment length (2, 3)")
    ck.add_argument("--samples", type=int, default=8192)
    ck.add_argument("--fan", type=int, default=4096)

    wd = sub.add_parser("words", help="partition, forbidden words and the regularity ledger", parents=[common])
    wd.add_argument("surface", nargs="?")
    wd.add_argument("--deltaA", type=float, default=None)
    wd.add_argument("--deltaPsi", type=float, default=None)
    wd.add_argument("--scan", default="forbidden", choices=["forbidden", "ledger"])
    wd.add_argument("--n", type=int, default=2)
    wd.add_argument("--s", default="0")
    wd.add_argument("--horizon", type=float, default=None)
    wd.add_argument("--samples", type=int, default=8, help="samples per cell side in pair searches")

    fd = sub.add_parser("fdtd", help="finite difference wave experiment", parents=[common])
    fd.add_argument("target", nargs="?", help="scene or surface file")
    fd.add_argument("--h", type=float, default=1 / 64)
    fd.add_argument("--dt", type=float, default=None)
    fd.add_argument("--T", type=float, default=5.0)
    fd.add_argument("--source", default=None, help="x,y,f0[,sigma[,sheet]]")
    fd.add_argument("--probes", default=None, help="CSV file of x,y[,sheet]")
    fd.add_argument("--doubled", action="store_true")
    fd.add_argument("--bc", default=None, choices=["dirichlet", "neumann"])
    fd.add_argument("--sponge", type=float, default=None, help="sponge width (0 for reflecting walls)")
    fd.add_argument("--domain", type=float, default=None, help="half-width of the square grid")
    fd.add_argument("--snapshot-every", type=int, default=0)
    fd.add_argument("--threshold", type=float, default=0.1)

    rp = sub.add_parser("report", help="summarise a bundle directory", parents=[common])
    rp.add_argument("bundle", nargs="?")
    rp.add_argument("-o", "--output", default=None, help="summary file (default <bundle>/report.md)")
    return p


# ---------------------------------------------------------------------------
# config and manifests


def _config_defaults(path: str, parser: argparse.ArgumentParser, command: str) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"malformed config {path}: expected a JSON object")
    if command in data and isinstance(data[command], dict):
        data = {**{k: v for k, v in data.items() if not isinstance(v, dict)}, **data[command]}
    data.pop("command", None)
    sub = _subparser(parser, command)
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(data) - known)
    if unknown:
        raise UsageError(f"malformed config {path}: unknown keys {unknown}")
    return data


def _subparser(parser, command):
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices[command]
    raise KeyError(command)


def _glue_values(argv: list) -> list:
    # "--start -1.5,0,0,0" would otherwise read the coordinate list as an option
    out, it = [], iter(argv)
    for tok in it:
        if tok in ("--start", "--source"):
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def parse(argv) -> argparse.Namespace:
    argv = _glue_values(list(argv))
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        defaults = _config_defaults(args.config, parser, args.command)
        sub = _subparser(parser, args.command)
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    for name in _REQUIRED[args.command]:
        if getattr(args, name) is None:
            raise UsageError(f"conewave {args.command}: missing {name} (argument or config key)")
    return args


_REQUIRED = {"scene": ("action", "file"), "trace": ("surface",), "check": ("surface",), "words": ("surface",),
             "fdtd": ("target",), "report": ("bundle",)}


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _versions() -> dict:
    import numba
    import scipy

    return {"conewave": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def run_config(args) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("config",)}
    return json.loads(json.dumps(cfg, default=str))


def write_manifest(out: Path, stage: str, args, outputs: list, extra: dict | None = None) -> Path:
    cfg = run_config(args)
    blob = json.dumps(cfg, sort_keys=True).encode()
    man = {
        "stage": stage,
        "config": cfg,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "versions": _versions(),
        "seed": args.seed,
        "threads": args.threads,
        "outputs": {str(Path(p).relative_to(out)): sha256(Path(p)) for p in sorted(map(str, outputs))},
    }
    if extra:
        man.update(extra)
    path = out / f"manifest.{stage}.json"
    path.write_text(json.dumps(man, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, data):
    path.write_text(json.dumps(data, indent=1, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _need_file(path: str):
    if not Path(path).is_file():
        raise FileNotFoundError(path)


def _surface(path: str):
    from .surface import load_any

    _need_file(path)
    return load_any(path)


# ---------------------------------------------------------------------------
# commands


def cmd_scene(args, out: Path) -> int:
    from .surface import PolygonScene, build_surface, load_scene, save_surface

    _need_file(args.file)
    scene = load_scene(args.file, drop_straight=args.drop_straight)
    problems = scene.validate()
    outputs = []
    if args.action == "validate":
        info = {"name": scene.name, "valid": not problems, "problems": problems, "R0": scene.R0, "R1": scene.R1,
                "bc": scene.bc}
        if isinstance(scene, PolygonScene):
            info["obstacles"] = len(scene.obstacles)
            info["vertices"] = int(sum(len(o) for o in scene.obstacles))
        path = out / "scene.json"
        _write_json(path, info)
        outputs.append(path)
        print(json.dumps(info, indent=1))
        write_manifest(out, "scene", args, outputs)
        return EX_OK if not problems else EX_ERROR
    if problems:
        print("invalid scene:\n  " + "\n  ".join(problems), file=sys.stderr)
        return EX_ERROR
    surface = build_surface(scene)
    target = Path(args.output) if args.output else out / "surface.json"
    save_surface(surface, target)
    if target.resolve().is_relative_to(out.resolve()):
        outputs.append(target)
    print(f"{surface.n_sheets} sheets, {surface.n_cones} cone points; angles/pi: "
          + " ".join(f"{c.angle / math.pi:.6g}" for c in surface.cones))
    write_manifest(out, "scene", args, outputs, {"surface_file": str(target), "surface_sha256": sha256(target)})
    return EX_OK


def cmd_trace(args, out: Path) -> int:
    from . import flow

    surface = _surface(args.surface)
    policy = flow.Policy.parse(args.policy)
    horizon = args.horizon if args.horizon is not None else 2.0 * (2 * surface.R1 + surface.diameter)
    if args.start is None:
        raise UsageError("trace needs --start x,y,theta,sheet")
    x, y, theta, sheet = _floats(args.start, 4, "start")
    start = flow.RayState.from_angle(int(sheet), x, y, theta)
    res = flow.trace(surface, start, horizon, policy, cap=args.cap)
    path = out / "chains.csv"
    _write_csv(path, flow.CHAIN_COLUMNS, flow.chain_rows(res.chains))
    summary = {"chains": len(res.chains), "truncated": res.truncated, "branches": res.branches,
               "multi_geometric": sum(c.n_geometric >= 2 for c in res.chains),
               "terminals": {t: sum(c.terminal == t for c in res.chains)
                             for t in sorted({c.terminal for c in res.chains})},
               "surface": surface.to_dict()}
    spath = out / "trace.json"
    _write_json(spath, summary)
    print(f"{len(res.chains)} chains" + (" (truncated)" if res.truncated else ""))
    write_manifest(out, "trace", args, [path, spath])
    return EX_OK


def cmd_check(args, out: Path) -> int:
    from . import assumptions as A

    surface = _surface(args.surface)
    which = ["1", "2", "3"] if args.assumption == "all" else [args.assumption]
    outputs, verdicts = [], {}
    for k in which:
        if k == "1":
            horizon = args.horizon if args.horizon is not None else None
            rep = A.check_nontrapping(surface, n_samples=args.samples, horizon=horizon, seed=args.seed)
        elif k == "2":
            rep = A.check_collinear(surface, max_length=args.horizon, n_fan=args.fan)
        else:
            rep = A.check_conjugacy(surface, Tmax=args.horizon, n_fan=args.fan)
        path = out / f"assumption{k}.json"
        data = rep.to_dict()
        data["surface"] = surface.name
        _write_json(path, data)
        outputs.append(path)
        verdicts[k] = rep.verdict
        line = f"assumption {k}: {rep.verdict}"
        if k == "1" and rep.T0 is not None:
            line += f" (T0 = {rep.T0:.6g})"
        print(line)
    write_manifest(out, "check", args, outputs, {"verdicts": verdicts, "surface": surface.name})
    if any(v == A.FAIL for v in verdicts.values()):
        return EX_FAIL
    if any(v != A.PASS for v in verdicts.values()):
        return EX_ERROR
    return EX_OK


def cmd_words(args, out: Path) -> int:
    from . import words as W
    from .surface import min_cone_distance

    surface = _surface(args.surface)
    L = min_cone_distance(surface)
    dpsi = args.deltaPsi if args.deltaPsi is not None else (L / 400 if math.isfinite(L) else 0.01)
    dA = args.deltaA if args.deltaA is not None else 0.05
    part = W.build_partition(surface, dA, dpsi, seed=args.seed)
    scan = W.forbidden_scan(part, horizon=args.horizon, m=args.samples)
    outputs = []
    if args.scan == "forbidden":
        path = out / "forbidden.json"
        _write_json(path, {"surface": surface.name, "deltaA": dA, "deltaPsi": dpsi, "candidates": scan.candidates,
                           "complete": scan.complete,
                           "violations": [{"word": str(v.word), "cones": list(v.cones), "pattern": v.pattern,
                                           "times": list(v.word.times), "tags": "".join(v.word.tags)}
                                          for v in scan.violations]})
        outputs.append(path)
        print(f"{len(scan)} forbidden words among {scan.candidates} candidates")
    rows = [(w, W.smoothing_ledger(w, args.n, args.s)) for w in scan.words]
    lpath = out / "ledger.csv"
    lpath.write_text(W.ledger_csv(rows), encoding="utf-8")
    outputs.append(lpath)
    # the pattern table itself, independent of the scan
    tpath = out / "ledger_table.csv"
    _write_csv(tpath, ["pattern", "kind", "rule", "outputOrder"],
               [[p, e.kind, e.rule, str(e)] for p in _patterns() for e in [W.smoothing_ledger(p, args.n, args.s)]])
    outputs.append(tpath)
    if args.scan == "ledger":
        print(f"{len(rows)} ledger rows")
    write_manifest(out, "words", args, outputs, {"surface": surface.name, "forbidden": len(scan)})
    return EX_OK


def _patterns() -> list[str]:
    from itertools import product

    return ["".join(p) for n in range(4) for p in product("GD", repeat=n)]


def _read_probes(path: str):
    from .fdtd import Probe

    _need_file(path)
    probes = []
    for k, row in enumerate(csv.reader(io.StringIO(Path(path).read_text(encoding="utf-8")))):
        if not row or row[0].strip().startswith("#"):
            continue
        try:
            vals = [float(v) for v in row]
        except ValueError:
            if k == 0:
                continue  # header
            raise UsageError(f"{path}: bad probe row {row}") from None
        if len(vals) not in (2, 3):
            raise UsageError(f"{path}: probe rows need x,y[,sheet]")
        probes.append(Probe(vals[0], vals[1], int(vals[2]) if len(vals) == 3 else 0))
    return probes


def cmd_fdtd(args, out: Path) -> int:
    from . import fdtd as F
    from .flow import shortest_path
    from .surface import load_any, scene_from_dict

    _need_file(args.target)
    data = json.loads(Path(args.target).read_text(encoding="utf-8"))
    surface = load_any(args.target)
    scene = None if data.get("format") == "conewave-surface/1" else scene_from_dict(data)
    if args.source is None:
        raise UsageError("fdtd needs --source x,y,f0")
    sv = _floats(args.source, (3, 4, 5), "source")
    h = args.h
    src = F.Source(sv[0], sv[1], sv[2], sv[3] if len(sv) > 3 else 2.5 * h, int(sv[4]) if len(sv) > 4 else 0)
    sponge = args.sponge if args.sponge is not None else max(20 * h, 0.5)
    # probes near R1 need clearance from the sponge, whose reflections otherwise bias the picks
    D = args.domain if args.domain is not None else surface.R1 + 1.0 + sponge
    D = h * math.ceil(D / h)
    dt = args.dt if args.dt is not None else 0.6 * h
    grid = F.GridSpec(h, dt, D, args.T, sponge)
    probes = _read_probes(args.probes) if args.probes else []
    sheets = 2 if args.doubled else 1
    chi = F.cutoff(grid.axis, surface.R1, sheets)
    if args.doubled:
        solver = F.doubled_solver(surface, grid, [src])
    else:
        bc = args.bc or (scene.bc if scene is not None else surface.bc)
        if scene is None:
            from .surface import PolygonScene

            scene = PolygonScene(tuple(surface.obstacles), surface.R0, surface.R1, bc, surface.name)
        solver = F.exterior_solver(scene, grid, src, bc)
    snaps = out / "snapshots"
    written = []

    def save(s):
        if args.snapshot_every and s.n % args.snapshot_every == 0:
            snaps.mkdir(exist_ok=True)
            p = snaps / f"u_{s.n:07d}.bin"
            F.write_snapshot(p, s.u1, h, s.t)
            written.append(p)

    run = F.simulate(solver, probes, chi=chi, callback=save if args.snapshot_every else None)
    ser = run.series
    ppath = out / "probes.csv"
    _write_csv(ppath, ["t", "probeId", "u", "dudt", "E_chi"], ser.csv_rows())
    epath = out / "energy.csv"
    _write_csv(epath, ["t", "E_chi"], ([f"{t:.9g}", f"{e:.9e}"] for t, e in zip(ser.t, ser.E_chi)))
    outputs = [ppath, epath, *written]
    summary = {"grid": {"h": h, "dt": dt, "D": D, "T": args.T, "sponge": sponge, "n": grid.n},
               "source": {"x": src.x, "y": src.y, "f0": src.f0, "sigma": src.sigma, "sheet": src.sheet,
                          "delay": src.delay},
               "doubled": bool(args.doubled), "surface": surface.name,
               "E_chi_max": float(ser.E_chi.max()) if len(ser.E_chi) else 0.0}
    Em = summary["E_chi_max"]
    below = np.flatnonzero((ser.E_chi < 1e-3 * Em) & (np.arange(len(ser.E_chi)) > np.argmax(ser.E_chi)))
    summary["t_below_1e-3"] = float(ser.t[below[0]]) if len(below) and Em > 0 else None
    if probes:
        hw = F.pulse_halfwidth(src, dt)
        picks = F.arrival_times(ser, args.threshold, f0=src.f0, delay=src.delay - hw)
        obstacles = surface.obstacles
        rows = []
        for k, (pr, pk) in enumerate(zip(probes, picks)):
            ray = ""
            if pr.sheet == src.sheet:
                ray = shortest_path(obstacles, (src.x, src.y), (pr.x, pr.y)).length
            first = pk[0] if pk else ""
            err = first - ray if pk and ray != "" and math.isfinite(ray) else ""
            rows.append([k, pr.x, pr.y, pr.sheet, _fmt(ray), _fmt(first), _fmt(err)])
        apath = out / "arrivals.csv"
        _write_csv(apath, ["probeId", "x", "y", "sheet", "rayLength", "firstArrival", "difference"], rows)
        outputs.append(apath)
        summary["tolerance"] = 2 * h + hw
    spath = out / "fdtd.json"
    _write_json(spath, summary)
    outputs.append(spath)
    print(f"{grid.steps} steps on {grid.n}x{grid.n} x {sheets}; E_chi max {Em:.4g}")
    write_manifest(out, "fdtd", args, outputs, {"surface": surface.name})
    return EX_OK


def _fmt(v):
    return f"{v:.9g}" if isinstance(v, float) else v


def cmd_report(args, out: Path) -> int:
    from .report import ReportError, build_report

    try:
        path = build_report(Path(args.bundle), Path(args.output) if args.output else None)
    except ReportError as exc:
        print(f"report: {exc}", file=sys.stderr)
        return EX_ERROR
    print(path)
    return EX_OK


COMMANDS = {"scene": cmd_scene, "trace": cmd_trace, "check": cmd_check, "words": cmd_words, "fdtd": cmd_fdtd,
            "report": cmd_report}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EX_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    warnings.filterwarnings("ignore", message="The TBB threading layer")
    if args.threads:
        import numba

        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    out = Path(args.out)
    try:
        if args.command != "report":
            out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EX_USAGE
    except FileNotFoundError as exc:
        print(f"conewave: file not found: {exc.filename or exc}", file=sys.stderr)
        return EX_USAGE
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        print(f"conewave: malformed input: {exc}", file=sys.stderr)
        return EX_USAGE
    except Exception as exc:  # any failure of the pipeline stage itself
        print(f"conewave: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EX_ERROR


if __name__ == "__main__":
    sys.exit(main())
