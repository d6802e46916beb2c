"""Markdown summary of an output bundle, with SVG plots."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "conewave"  # stable element ids between runs


class ReportError(RuntimeError):
    pass


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_manifests(bundle: Path) -> dict:
    if not bundle.is_dir():
        raise ReportError(f"bundle {bundle} is not a directory")
    found = sorted(bundle.glob("manifest.*.json"))
    if not found:
        raise ReportError(f"empty bundle: no manifests in {bundle}")
    out = {}
    for p in found:
        try:
            out[p.name[len("manifest."):-len(".json")]] = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ReportError(f"{p.name}: unreadable manifest ({exc})") from None
    return out


def check_consistency(bundle: Path, manifests: dict) -> list[str]:
    """Mismatches between the manifests and the files on disk, and between manifests."""
    problems = []
    for stage, man in manifests.items():
        for rel, digest in man.get("outputs", {}).items():
            f = bundle / rel
            if not f.is_file():
                problems.append(f"{stage}: listed output {rel} is missing")
            elif _sha(f) != digest:
                problems.append(f"{stage}: {rel} does not match its recorded hash")
    versions = {stage: m.get("versions", {}).get("conewave") for stage, m in manifests.items()}
    if len(set(versions.values())) > 1:
        problems.append("manifests written by different package versions: "
                        + ", ".join(f"{k}={v}" for k, v in sorted(versions.items())))
    return problems


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _obstacle_patches(ax, obstacles, **kw):
    for loop in obstacles:
        loop = np.asarray(loop, dtype=float)
        ax.fill(loop[:, 0], loop[:, 1], facecolor="0.85", edgecolor="0.2", lw=1.0, **kw)


def _save(fig, path: Path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_chains(path: Path, obstacles, rows: list[dict], title: str = ""):
    fig, ax = plt.subplots(figsize=(5, 5))
    _obstacle_patches(ax, obstacles)
    chains = {}
    for r in rows:
        chains.setdefault(int(r["chainId"]), []).append(r)
    for cid, segs in sorted(chains.items()):
        for r in segs:
            x0, y0 = float(r["x0"]), float(r["y0"])
            L = float(r["length"])
            x1, y1 = x0 + L * float(r["dirx"]), y0 + L * float(r["diry"])
            ax.plot([x0, x1], [y0, y1], "-" if int(r["sheet"]) == 0 else "--", color=f"C{cid % 10}", lw=0.8)
    ax.set_aspect("equal")
    ax.set_title(title or f"{len(chains)} chains (dashed: sheet 1)")
    _save(fig, path)


def plot_figure1(path: Path):
    """The two-obstacle scene with its trapped diffractive orbit drawn dashed."""
    from .assumptions import trapped_orbit
    from .corpus import figure1
    from .surface import double_exterior

    scene = figure1()
    chain = trapped_orbit(double_exterior(scene), 6, 4.5, periods=1)
    fig, ax = plt.subplots(figsize=(6, 4))
    _obstacle_patches(ax, scene.obstacles)
    for seg in chain.segments:
        a, b = seg.start, seg.end
        ax.plot([a[0], b[0]], [a[1], b[1]], "k--", lw=1.5)
    ax.plot(*scene.obstacles[1][0], "ko", ms=4)
    ax.set_aspect("equal")
    ax.set_xlim(-4, 5)
    ax.set_ylim(-3, 2)
    ax.set_title("trapped diffractive orbit (dashed)")
    _save(fig, path)
    return chain


def plot_energy(path: Path, rows: list[dict]):
    t = np.array([float(r["t"]) for r in rows])
    e = np.array([float(r["E_chi"]) for r in rows])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    m = e > 0
    ax.semilogy(t[m], e[m], lw=1.0)
    if m.any():
        ax.axhline(1e-3 * e.max(), color="0.5", ls=":", lw=0.8)
    ax.set_xlabel("t")
    ax.set_ylabel("E_chi")
    _save(fig, path)


def _table(header, rows) -> str:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(out)


def build_report(bundle: Path, output: Optional[Path] = None) -> Path:
    manifests = load_manifests(bundle)
    problems = check_consistency(bundle, manifests)
    if problems:
        raise ReportError("inconsistent manifests:\n  " + "\n  ".join(problems))
    stages = set(manifests)
    figs = bundle / "figures"
    figs.mkdir(exist_ok=True)
    lines = ["# conewave report", ""]
    trace_only = stages == {"trace"}

    if "trace" in stages:
        info = json.loads((bundle / "trace.json").read_text(encoding="utf-8"))
        rows = _read_csv(bundle / "chains.csv")
        plot_chains(figs / "trajectories.svg", info["surface"]["obstacles"], rows)
        lines += ["## Trajectories", "",
                  f"{info['chains']} chains on `{info['surface']['name']}`"
                  + (" (branch cap reached)" if info["truncated"] else "") + ".", "",
                  "![trajectories](figures/trajectories.svg)", ""]
    if trace_only:
        return _finish(bundle, output, lines)

    chain = plot_figure1(figs / "figure1.svg")
    kinds = sorted({i.kind for i in chain.interactions})
    lines += ["## Two-obstacle scene", "",
              f"Orbit between the vertex (1, 0) and the face x = -1, length {chain.total_time:.6g} "
              f"per return; interaction kinds: {', '.join(kinds)}.", "",
              "![two-obstacle scene](figures/figure1.svg)", ""]

    if "scene" in stages:
        man = manifests["scene"]
        lines += ["## Scene", "", f"Action `{man['config'].get('action')}` on `{man['config'].get('file')}`.", ""]
    if "check" in stages:
        rows = []
        for k in ("1", "2", "3"):
            f = bundle / f"assumption{k}.json"
            if not f.is_file():
                continue
            rep = json.loads(f.read_text(encoding="utf-8"))
            extra = ""
            if k == "1" and rep.get("T0") is not None:
                extra = f"T0 = {rep['T0']:.6g}"
            elif k == "2" and rep["witnesses"]:
                extra = "witness cones " + ", ".join(str(tuple(w["cones"])) for w in rep["witnesses"][:3])
            elif k == "3":
                extra = f"{len(rep['certificates'])} segment certificates"
            rows.append([k, rep["verdict"], extra])
        lines += ["## Assumptions", "", _table(["assumption", "verdict", "details"], rows), ""]
    if "words" in stages:
        table = _read_csv(bundle / "ledger_table.csv")
        man = manifests["words"]
        lines += ["## Regularity ledger", "",
                  f"Forbidden words found: {man.get('forbidden', 0)}.", "",
                  _table(["pattern", "kind", "output order"],
                         [[r["pattern"] or "(none)", r["kind"], r["outputOrder"]] for r in table]), ""]
    if "fdtd" in stages:
        info = json.loads((bundle / "fdtd.json").read_text(encoding="utf-8"))
        plot_energy(figs / "energy.svg", _read_csv(bundle / "energy.csv"))
        g = info["grid"]
        lines += ["## Wave experiment", "",
                  f"Grid h = {g['h']:.6g}, dt = {g['dt']:.6g}, {g['n']}x{g['n']} nodes, T = {g['T']:.6g}"
                  + (", doubled surface" if info["doubled"] else "") + ".", "",
                  "![energy](figures/energy.svg)", ""]
        if info.get("t_below_1e-3") is not None:
            lines += [f"E_chi falls below 1e-3 of its maximum at t = {info['t_below_1e-3']:.6g}.", ""]
        arr = bundle / "arrivals.csv"
        if arr.is_file():
            rows = _read_csv(arr)
            lines += [f"Arrival picks against ray lengths (tolerance {info.get('tolerance', 0):.4g}):", "",
                      _table(["probe", "x", "y", "sheet", "ray length", "first arrival", "difference"],
                             [[r["probeId"], r["x"], r["y"], r["sheet"], r["rayLength"], r["firstArrival"],
                               r["difference"]] for r in rows]), ""]
    return _finish(bundle, output, lines)


def _finish(bundle: Path, output: Optional[Path], lines: list) -> Path:
    path = output if output is not None else bundle / "report.md"
    path.write_text("\n".join(lines).rstrip() + "\n", encoding="utf-8")
    return path
