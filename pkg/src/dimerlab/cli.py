"""Command-line front end for the exact and stochastic dimer engines.

Eight subcommands: ``validate`` checks a cell-spec file, ``partition``
evaluates the matching sum by a chosen engine, ``signs`` emits the
per-cell sector sign table, ``spectral`` locates the zeros of the
characteristic polynomial, ``correlate`` evaluates planar two-edge
correlations for a list of edge pairs, ``ward`` reports conservation-law
residuals, ``sample`` runs the Markov chain, and ``height-cov`` emits
height variance profiles (exact or sampled).

Every run writes into ``--out/<hash>/`` where ``<hash>`` is the first 12
hex digits of the manifest hash (command + spec content + parameters),
so identical invocations land in the same directory and reproduce the
same primary outputs.  CSV rows and JSON payloads carry the hash in a
``manifest`` column/key; ``manifest.json`` stores the full record.

Exit codes: 0 success, 1 invalid input, 2 resource or convergence
failure, 3 violated internal invariant.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import enumeration, grassmann, kasteleyn, mcmc, spectral
from .errors import (
    BudgetExceeded,
    DimerlabError,
    InsufficientStatistics,
    InvalidSpec,
    NewtonDivergence,
    NotLiquidPhase,
    QuadratureNotConverged,
    TooLarge,
)
from .lattice import build_graph, load_spec, validate_spec

logger = logging.getLogger(__name__)

_RETRYABLE = (TooLarge, BudgetExceeded, NewtonDivergence,
              QuadratureNotConverged, InsufficientStatistics,
              NotLiquidPhase)


@dataclass
class RunManifest:
    """Reproducibility record of one CLI run.

    The hash covers command, spec content, and parameters -- not paths,
    timestamps, or thread counts, so reruns of the same computation map
    to the same output directory.
    """

    command: str
    spec_path: str
    spec_sha256: str
    parameters: dict
    threads: int = 0
    created: str = ""
    outputs: list = field(default_factory=list)

    def run_hash(self):
        payload = json.dumps(
            {"command": self.command, "spec": self.spec_sha256,
             "parameters": self.parameters},
            sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def to_dict(self):
        return {
            "command": self.command,
            "spec_path": self.spec_path,
            "spec_sha256": self.spec_sha256,
            "parameters": self.parameters,
            "threads": self.threads,
            "created": self.created,
            "outputs": list(self.outputs),
            "hash": self.run_hash(),
        }

    @classmethod
    def from_dict(cls, d):
        man = cls(command=d["command"], spec_path=d["spec_path"],
                  spec_sha256=d["spec_sha256"], parameters=d["parameters"],
                  threads=d.get("threads", 0), created=d.get("created", ""),
                  outputs=list(d.get("outputs", [])))
        stored = d.get("hash")
        if stored and stored != man.run_hash():
            raise ValueError(f"manifest hash mismatch: {stored}")
        return man


# ---------------------------------------------------------------------------
# plumbing


def _load_valid_spec(path):
    spec = load_spec(path)
    violations = validate_spec(spec)
    if violations:
        raise InvalidSpec(violations)
    return spec


def _threads(args):
    return args.threads if args.threads else (os.cpu_count() or 1)


def _start_run(args, parameters):
    with open(args.spec, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    manifest = RunManifest(
        command=args.command, spec_path=str(args.spec), spec_sha256=digest,
        parameters=parameters, threads=_threads(args),
        created=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))
    run_dir = os.path.join(args.out, manifest.run_hash())
    os.makedirs(run_dir, exist_ok=True)
    logger.info("run %s -> %s", manifest.run_hash(), run_dir)
    return manifest, run_dir


def _finish_run(manifest, run_dir):
    path = os.path.join(run_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"run {manifest.run_hash()}: "
          f"{', '.join(manifest.outputs)} in {run_dir}")


def _write_csv(run_dir, name, header, rows, manifest):
    h = manifest.run_hash()
    with open(os.path.join(run_dir, name), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["manifest"] + list(header))
        for row in rows:
            wr.writerow([h] + [repr(float(v)) if isinstance(v, float) else v
                               for v in row])
    manifest.outputs.append(name)


def _write_json(run_dir, name, payload, manifest):
    body = {"manifest": manifest.run_hash()}
    body.update(payload)
    with open(os.path.join(run_dir, name), "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.outputs.append(name)


def _parse_cell(text):
    parts = text.split(",")
    if len(parts) != 2:
        raise InvalidSpec([f"cell '{text}' is not of the form x1,x2"])
    return int(parts[0]), int(parts[1])


def _parse_targets(text):
    return [_parse_cell(tok) for tok in text.split(";") if tok]


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args):
    try:
        spec = load_spec(args.spec)
    except InvalidSpec as exc:
        for v in exc.violations:
            print(f"invalid: {v}", file=sys.stderr)
        return 1
    violations = validate_spec(spec)
    if violations:
        for v in violations:
            print(f"invalid: {v}", file=sys.stderr)
        return 1
    print(f"ok: m={spec.m}, {len(spec.bridges)} non-planar edge(s), "
          f"{len(spec.planar_weights)} weight override(s)")
    return 0


def cmd_partition(args):
    spec = _load_valid_spec(args.spec)
    manifest, run_dir = _start_run(args, {
        "L": args.L, "lambda": args.lam, "method": args.method,
        "budget": args.budget})
    graph = build_graph(spec, args.L, lam=args.lam)
    if args.method == "kasteleyn":
        if graph.n_bridges and args.lam != 0.0:
            raise InvalidSpec(
                ["the determinant engine covers the lattice measure only; "
                 "use --lambda 0 or --method grassmann/enumerate"])
        z = kasteleyn.partition_function(graph)
        logz = kasteleyn.log_partition_function(graph)
    elif args.method == "grassmann":
        z = grassmann.nonplanar_partition(graph, budget=args.budget)
        logz = float(np.log(abs(z))) if z else None
    else:
        z = enumeration.weighted_sum(graph)
        logz = float(np.log(abs(z))) if z else None
    _write_json(run_dir, "result.json", {
        "Z": float(z), "log_abs_Z": logz, "method": args.method,
        "L": args.L, "lambda": args.lam}, manifest)
    _finish_run(manifest, run_dir)
    print(f"Z = {z:.12e} (method={args.method}, L={args.L}, "
          f"lambda={args.lam})")
    return 0


def cmd_signs(args):
    spec = _load_valid_spec(args.spec)
    manifest, run_dir = _start_run(args, {})
    table = grassmann.cell_sectors(spec)
    rows = []
    for (jmask, crossed), sec in sorted(table.items()):
        btxt = "+".join(str(k) for k in sec.bridges) or "-"
        ctxt = "+".join(f"{ell}:{j}" for ell, j in crossed) or "-"
        rows.append([btxt, ctxt, sec.epsilon, sec.pairing_sign])
    _write_csv(run_dir, "sector_signs.csv",
               ["bridges", "crossed", "epsilon", "pairing_sign"],
               rows, manifest)
    _finish_run(manifest, run_dir)
    print(f"{len(rows)} sector(s)")
    if len(rows) <= 40:
        for btxt, ctxt, eps, psign in rows:
            print(f"  bridges={btxt:<8} crossed={ctxt:<16} "
                  f"epsilon={eps:+d} pairing={psign:+d}")
    return 0


def cmd_spectral(args):
    spec = _load_valid_spec(args.spec)
    manifest, run_dir = _start_run(args, {"grid": args.grid})
    fermi = spectral.find_fermi_points(spec, grid=args.grid)
    report = spectral.fermi_report(fermi)
    _write_json(run_dir, "fermi.json", report, manifest)
    _finish_run(manifest, run_dir)
    pp, pm = report["p0_plus"], report["p0_minus"]
    print(f"zeros: +({pp[0]:.6f}, {pp[1]:.6f})  -({pm[0]:.6f}, {pm[1]:.6f})")
    print(f"Im(beta/alpha) = {report['im_beta_over_alpha']:.6f}, "
          f"adjugate rank-1 residual = {report['adj_rank1_residual']:.2e}")
    return 0


def cmd_correlate(args):
    spec = _load_valid_spec(args.spec)
    with open(args.pairs) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise InvalidSpec(["pairs file must hold a JSON list of "
                           "[[cell, ell, j], [cell, ell, j]] entries"])
    with open(args.pairs, "rb") as fh:
        pairs_sha = hashlib.sha256(fh.read()).hexdigest()
    manifest, run_dir = _start_run(args, {
        "pairs_sha256": pairs_sha, "method": args.method})
    fermi = spectral.find_fermi_points(spec)

    def one(entry):
        e1, e2 = entry
        val = spectral.correlation_planar(fermi, e1, e2, method=args.method)
        a, b = spectral.asymptotic_correlation(fermi, e1, e2)
        return val, a + b

    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=_threads(args)) as pool:
        results = list(pool.map(one, raw))
    rows = []
    for (e1, e2), (val, asym) in zip(raw, results):
        dx = (e1[0][0] - e2[0][0], e1[0][1] - e2[0][1])
        dist = float(np.hypot(*dx))
        rows.append([dist, val, 0.0,
                     e1[0][0], e1[0][1], e1[1], e1[2],
                     e2[0][0], e2[0][1], e2[1], e2[2], asym])
    _write_csv(run_dir, "correlations.csv",
               ["distance", "value", "stderr",
                "x1", "y1", "ell1", "j1", "x2", "y2", "ell2", "j2",
                "asymptotic"], rows, manifest)
    _finish_run(manifest, run_dir)
    print(f"{len(rows)} pair(s), max |corr| = "
          f"{max((abs(r[1]) for r in rows), default=0.0):.3e}")
    return 0


def cmd_ward(args):
    spec = _load_valid_spec(args.spec)
    manifest, run_dir = _start_run(args, {
        "L": args.L, "lambda": args.lam, "budget": args.budget})
    graph = build_graph(spec, args.L, lam=args.lam)
    ntypes = spec.m * spec.m // 2
    cells = sorted({(0, 0), (0, args.L // 2), (args.L // 2, args.L // 2)})
    types = [t for t in [(1, 1, 1), (2, 1, 2)] if max(t) <= ntypes]
    rows = []
    for y in cells:
        for z in cells:
            for t in types:
                res = grassmann.ward_residual(
                    graph, (0, 0), y, z, types=t, budget=args.budget)
                rows.append([0, 0, y[0], y[1], z[0], z[1],
                             t[0], t[1], t[2], res])
    _write_csv(run_dir, "ward.csv",
               ["x1", "x2", "y1", "y2", "z1", "z2",
                "tx", "ty", "tz", "residual"], rows, manifest)
    _finish_run(manifest, run_dir)
    worst = max(r[-1] for r in rows)
    print(f"{len(rows)} identity check(s), max residual = {worst:.3e}")
    return 0


def cmd_sample(args):
    spec = _load_valid_spec(args.spec)
    thin = args.thin if args.thin else max(1, args.sweeps // 1000)
    manifest, run_dir = _start_run(args, {
        "L": args.L, "lambda": args.lam, "sweeps": args.sweeps,
        "seed": args.seed, "thin": thin,
        "worms_per_sweep": args.worms_per_sweep})
    graph = build_graph(spec, args.L, lam=args.lam)
    tables = mcmc.MoveTables(graph)
    t0 = time.perf_counter()
    _, ids, counters = mcmc.run_serial(
        graph, args.sweeps, seed=args.seed, thin=thin,
        worms_per_sweep=args.worms_per_sweep, tables=tables)
    dt = time.perf_counter() - t0
    rows = [[(i + 1) * thin, int(cid)] for i, cid in enumerate(ids)]
    _write_csv(run_dir, "samples.csv", ["sweep", "config_id"],
               rows, manifest)
    worms = int(counters[2])
    summary = {
        "sweeps": args.sweeps, "seconds": dt,
        "face_proposals": int(counters[0]),
        "face_changes": int(counters[1]),
        "worms": worms,
        "worm_mean_steps": float(counters[3] / max(worms, 1)),
        "worm_aborts": int(counters[4]),
        "distinct_states": len(set(int(c) for c in ids)),
    }
    if counters[4]:
        logger.warning("%d worm update(s) hit the step cap", counters[4])
    _write_json(run_dir, "summary.json", summary, manifest)
    _finish_run(manifest, run_dir)
    print(f"{len(rows)} sample(s) in {dt:.2f}s, "
          f"{summary['distinct_states']} distinct state(s), "
          f"mean worm length {summary['worm_mean_steps']:.1f}")
    return 0


def cmd_height_cov(args):
    spec = _load_valid_spec(args.spec)
    targets = (_parse_targets(args.targets) if args.targets
               else mcmc.default_stiffness_targets(args.L))
    base = _parse_cell(args.base) if args.base else (args.L // 2, args.L // 2)
    manifest, run_dir = _start_run(args, {
        "L": args.L, "lambda": args.lam, "base": list(base),
        "targets": [list(t) for t in targets], "sweeps": args.sweeps,
        "chains": args.chains, "burn": args.burn, "thin": args.thin,
        "seed": args.seed})
    graph = build_graph(spec, args.L, lam=args.lam)
    if graph.n_bridges and args.lam != 0.0:
        raise InvalidSpec(
            ["height increments are defined for the lattice measure only; "
             "use --lambda 0"])
    base_face = divmod(graph.cell_corner_face(*base), graph.n)
    faces = [divmod(graph.cell_corner_face(base[0] + dx[0],
                                           base[1] + dx[1]), graph.n)
             for dx in targets]
    probe = mcmc.HeightProbe(graph, base_face, faces)
    try:
        fermi = spectral.find_fermi_points(spec)
        pred = [float(np.log(abs(fermi.phi(1, dx))) / np.pi ** 2)
                for dx in targets]
    except NotLiquidPhase as exc:
        logger.info("no free-field prediction: %s", exc)
        pred = [float("nan")] * len(targets)
    if args.sweeps == 0:
        _, cov = mcmc.planar_height_moments(graph, probe)
        variances = np.diag(cov)
        se = np.zeros(len(targets))
    else:
        children = np.random.SeedSequence(args.seed).spawn(args.chains)
        per_chain = np.zeros((args.chains, len(targets)))
        for c, child in enumerate(children):
            rng = np.random.Generator(np.random.Philox(child))
            chain = mcmc.CheckerboardChain(graph, rng=rng, worms_per_sweep=2)
            chain.sweep(args.burn)
            hs = np.zeros((args.sweeps, len(targets)))
            for i in range(args.sweeps):
                chain.sweep(args.thin)
                hs[i] = probe.measure(chain.dirv)
            per_chain[c] = hs.var(axis=0, ddof=1)
        variances = per_chain.mean(axis=0)
        se = per_chain.std(axis=0, ddof=1) / np.sqrt(args.chains)
    rows = [[dx[0], dx[1], float(np.hypot(*dx)), pred[i],
             float(variances[i]), float(se[i])]
            for i, dx in enumerate(targets)]
    _write_csv(run_dir, "height_cov.csv",
               ["dx1", "dx2", "distance", "predicted_profile",
                "variance", "stderr"], rows, manifest)
    _finish_run(manifest, run_dir)
    mode = "exact" if args.sweeps == 0 else f"{args.chains} chain(s)"
    print(f"{len(rows)} displacement(s) ({mode}), max variance = "
          f"{variances.max():.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="runs", metavar="DIR",
                        help="root directory for run outputs")
    common.add_argument("--threads", type=int, default=0,
                        help="worker threads (default: all cores)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(
        prog="dimerlab",
        description="Exact and Monte Carlo analysis of decorated dimer "
                    "models on the torus.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", parents=[common],
                       help="check a cell spec file")
    p.add_argument("spec")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("partition", parents=[common],
                       help="matching sum by a chosen engine")
    p.add_argument("spec")
    p.add_argument("--L", type=int, default=1)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--method", default="kasteleyn",
                   choices=["kasteleyn", "grassmann", "enumerate"])
    p.add_argument("--budget", type=int, default=None,
                   help="sector-count cap (default: DIMERLAB_BUDGET or 1e6)")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("signs", parents=[common],
                       help="per-cell sector sign table")
    p.add_argument("spec")
    p.set_defaults(func=cmd_signs)

    p = sub.add_parser("spectral", parents=[common],
                       help="zeros of the characteristic polynomial")
    p.add_argument("spec")
    p.add_argument("--grid", type=int, default=512)
    p.set_defaults(func=cmd_spectral)

    p = sub.add_parser("correlate", parents=[common],
                       help="planar two-edge correlations")
    p.add_argument("spec")
    p.add_argument("--pairs", required=True,
                   help="JSON list of [[cell,ell,j],[cell,ell,j]] pairs")
    p.add_argument("--method", default="residue",
                   choices=["residue", "midpoint"])
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("ward", parents=[common],
                       help="conservation-identity residuals")
    p.add_argument("spec")
    p.add_argument("--L", type=int, default=1)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--budget", type=int, default=None)
    p.set_defaults(func=cmd_ward)

    p = sub.add_parser("sample", parents=[common],
                       help="run the Markov chain")
    p.add_argument("spec")
    p.add_argument("--L", type=int, default=1)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--sweeps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--thin", type=int, default=0,
                   help="record every thin-th sweep (default sweeps/1000)")
    p.add_argument("--worms-per-sweep", type=int, default=1)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("height-cov", parents=[common],
                       help="height variance profile, exact or sampled")
    p.add_argument("spec")
    p.add_argument("--L", type=int, default=8)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--base", default="",
                   help="base cell x1,x2 (default: center)")
    p.add_argument("--targets", default="",
                   help="semicolon list of cell displacements dx1,dx2;...")
    p.add_argument("--sweeps", type=int, default=0,
                   help="samples per chain; 0 = exact determinant route")
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--burn", type=int, default=500)
    p.add_argument("--thin", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_height_cov)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=(logging.DEBUG if args.verbose > 1
               else logging.INFO if args.verbose else logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidSpec as exc:
        for v in exc.violations:
            print(f"invalid: {v}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 1
    except _RETRYABLE as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2
    except DimerlabError as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
