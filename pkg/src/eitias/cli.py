"""Command-line pipeline: mesh, simulate, reconstruct, bench, convexity, compare.

Every command validates its inputs (exit code 2 on bad usage or files),
propagates numerical failures as exit code 3, and writes all outputs
atomically.  Commands are deterministic for fixed inputs and seeds apart
from wall-time columns.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import EitError, NumericalError, ValidationError
from .cem import (
    MeasurementSet,
    assemble_system,
    load_measurement,
    save_measurement,
    solve_frame,
    trigonometric_basis,
)
from .fileio import atomic_write_csv, atomic_write_json, read_json
from .hypermodel import HyperModel
from .ias import HybridConfig, IasConfig, compare_map_qmap, run_hybrid, run_ias
from .lsq import BACKENDS
from .mesh import (
    ElectrodeLayout,
    build_disc_mesh,
    build_increment_operator,
    load_mesh,
    mark_subdomain,
    mesh_id,
    save_mesh,
)
from .phantom import PhantomSpec, simulate_measurement
from .render import (
    save_bench_figures,
    save_compare_figure,
    save_field_figure,
    save_field_svg,
    save_trace_figure,
)
from .sensitivity import compute_vartheta, convexity_probe, jacobian_adjoint

INNER_CSV_HEADER = ["ias_iter", "linearization", "backend", "iterations", "residual", "wall_time_ms"]


def _say(args, *parts):
    if not getattr(args, "quiet", False):
        print(*parts)


def _outdir(args) -> Path:
    out = Path(getattr(args, "out", None) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Configuration loading
# ---------------------------------------------------------------------------


def _load_config(args) -> tuple[dict, Path]:
    if not getattr(args, "config", None):
        raise ValidationError("this command requires --config <file>")
    path = Path(args.config)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    return read_json(path), path.parent


class Pipeline:
    """Everything reusable across reconstruction-style commands."""

    def __init__(self, cfg: dict, base: Path, quiet: bool = False):
        mesh_path = base / cfg["mesh"]
        meas_path = base / cfg["measurement"]
        if not mesh_path.exists():
            raise ValidationError(f"mesh file not found: {mesh_path}")
        if not meas_path.exists():
            raise ValidationError(f"measurement file not found: {meas_path}")
        mesh, arcs = load_mesh(mesh_path)
        z0 = float(cfg.get("z0", 1e-6))
        self.layout = ElectrodeLayout(arcs=arcs, contact_impedances=np.full(len(arcs), z0))
        self.d_radius = float(cfg.get("d_radius", 0.9))
        self.mesh, self.sub = mark_subdomain(mesh, self.d_radius)
        self.op = build_increment_operator(self.mesh, self.sub)
        self.basis = trigonometric_basis(self.layout.count)
        self.sigma0 = float(cfg.get("sigma0", 1.0))
        self.system = assemble_system(self.mesh, self.sub, self.layout, self.basis, self.sigma0)
        self.measurement = load_measurement(meas_path)
        if self.measurement.num_electrodes != self.layout.count:
            raise ValidationError("measurement and mesh disagree on the electrode count")
        self.mesh_id = mesh_id(self.mesh)
        if self.measurement.provenance.get("mesh_id") == self.mesh_id:
            warnings.warn(
                "measurement was simulated on this very mesh (inverse crime); "
                "reconstruction quality will be overly optimistic",
                RuntimeWarning,
            )
        self.hyper = self._hypermodel(cfg.get("hypermodel", {}), quiet)
        self.config = self._ias_config(cfg.get("ias", {}))
        self.render_cfg = cfg.get("render", {})

    def _hypermodel(self, block: dict, quiet: bool) -> HyperModel:
        r = float(block.get("r", 1.0))
        max_vt = float(block.get("max_vartheta", 4.0))
        sol0 = solve_frame(self.system, np.zeros(self.sub.n))
        j0 = jacobian_adjoint(sol0, self.system)
        vartheta = compute_vartheta(j0, self.op, max_value=max_vt)
        if not quiet:
            print(f"sensitivity scales: max={vartheta.max():.3g} min={vartheta.min():.3g}")
        if "beta" in block:
            return HyperModel(r=r, beta=float(block["beta"]), vartheta=vartheta)
        eta = float(block.get("eta", 1e-5))
        return HyperModel.from_eta(r, eta, vartheta)

    def _ias_config(self, block: dict) -> IasConfig:
        hybrid = None
        if "hybrid" in block and block["hybrid"] is not None:
            hb = block["hybrid"]
            hybrid = HybridConfig(
                r2=float(hb["r2"]), phase2_iterations=int(hb.get("phase2_iterations", 4))
            )
        return IasConfig(
            tolerance=float(block.get("tolerance", 2e-2)),
            max_outer_iterations=int(block.get("max_outer_iterations", 40)),
            inner_linearizations=int(block.get("inner_linearizations", 2)),
            backend=block.get("backend", "adjoint-direct"),
            lanczos_tol=float(block.get("lanczos_tol", 1e-8)),
            hybrid=hybrid,
            cgls_semiconvergence=bool(block.get("cgls_semiconvergence", True)),
        )


def _trace_rows(state):
    rows = []
    for rec in state.trace:
        gz = rec.gibbs_after_zeta
        gt = rec.gibbs_after_theta
        rows.append(
            [
                rec.index,
                rec.phase,
                f"{rec.delta_theta_rel:.8e}",
                f"{gz.total:.10e}" if gz else "",
                f"{gz.fidelity:.10e}" if gz else "",
                f"{gz.penalty:.10e}" if gz else "",
                f"{gz.hyper_terms:.10e}" if gz else "",
                f"{gt.total:.10e}" if gt else "",
                rec.compressibility,
                rec.damping_steps,
                f"{rec.wall_time_ms:.1f}",
            ]
        )
    return rows


TRACE_HEADER = [
    "iteration",
    "phase",
    "delta_theta_rel",
    "gibbs_after_zeta",
    "fidelity",
    "penalty",
    "hyper_terms",
    "gibbs_after_theta",
    "compressibility",
    "damping_steps",
    "wall_time_ms",
]


def _inner_rows(state):
    rows = []
    for rec in state.trace:
        for k, rep in enumerate(rec.inner_reports, start=1):
            resid = rep.residual_history[-1] if rep.residual_history else ""
            rows.append(
                [rec.index, k, rep.backend, rep.iterations, f"{resid:.6e}", f"{rep.wall_time_ms:.2f}"]
            )
    return rows


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_mesh(args) -> int:
    if not 0 < args.fill < 1:
        raise ValidationError(f"--fill must lie strictly between 0 and 1 (got {args.fill})")
    layout = ElectrodeLayout.uniform(args.electrodes, args.fill, args.z0)
    mesh = build_disc_mesh(layout, args.target, args.grading)
    mesh, sub = mark_subdomain(mesh, args.d_radius)
    op = build_increment_operator(mesh, sub)
    out = _outdir(args) / args.name
    save_mesh(out, mesh, layout.arcs)
    _say(
        args,
        f"mesh written to {out}: n_t={mesh.num_triangles} n_v={mesh.num_vertices} "
        f"n={sub.n} N={op.num_edges} id={mesh_id(mesh)}",
    )
    return 0


def cmd_simulate(args) -> int:
    spec = PhantomSpec.load(args.phantom)
    mesh, arcs = load_mesh(args.mesh)
    layout = ElectrodeLayout(arcs=arcs, contact_impedances=np.full(len(arcs), args.z0))
    basis = trigonometric_basis(layout.count)
    recon_id = None
    if args.recon_mesh:
        recon, _ = load_mesh(args.recon_mesh)
        recon_id = mesh_id(recon)
    ms = simulate_measurement(
        spec, mesh, layout, basis, args.noise, seed=args.seed, reconstruction_mesh_id=recon_id
    )
    out = _outdir(args) / args.name
    save_measurement(out, ms)
    _say(
        args,
        f"measurement written to {out}: m={ms.m} noise_std={ms.noise_std:.6e} "
        f"max|U|={np.abs(ms.data).max():.6e} seed={args.seed}",
    )
    return 0


def cmd_reconstruct(args) -> int:
    cfg, base = _load_config(args)
    pipe = Pipeline(cfg, base, quiet=args.quiet)
    config = pipe.config
    if args.backend:
        config = replace(config, backend=args.backend)
    if args.snapshots:
        config = replace(config, capture_fields=True)
    if args.hybrid_r2 is not None:
        config = replace(
            config,
            hybrid=HybridConfig(r2=args.hybrid_r2, phase2_iterations=args.phase2_iterations),
        )
        state = run_hybrid(pipe.measurement, pipe.system, pipe.op, pipe.hyper, config)
    elif config.hybrid is not None:
        state = run_hybrid(pipe.measurement, pipe.system, pipe.op, pipe.hyper, config)
    else:
        state = run_ias(pipe.measurement, pipe.system, pipe.op, pipe.hyper, config)

    out = _outdir(args)
    sigma = pipe.sigma0 + np.concatenate(
        [state.xi, np.zeros(pipe.mesh.num_triangles - pipe.sub.n)]
    )
    # conditioning is reported (small contact impedances inflate it) but the
    # system is deliberately not rescaled
    from .cem import FrameFactorization

    cond = FrameFactorization(pipe.system, state.xi).condition_estimate()
    _say(args, f"system 1-norm condition estimate at the solution: {cond:.3e}")
    atomic_write_json(
        out / "field.json",
        {
            "mesh_id": pipe.mesh_id,
            "d_radius": pipe.d_radius,
            "sigma0": pipe.sigma0,
            "converged": state.converged,
            "iterations": state.iterations,
            "switch_index": state.switch_index,
            "condition_estimate": cond,
            "xi": state.xi.tolist(),
            "zeta": state.zeta.tolist(),
            "theta": state.theta.tolist(),
        },
    )
    atomic_write_csv(out / "trace.csv", TRACE_HEADER, _trace_rows(state))
    atomic_write_csv(out / "inner.csv", INNER_CSV_HEADER, _inner_rows(state))
    if args.snapshots:
        for rec in state.trace:
            if rec.xi_snapshot is not None:
                atomic_write_json(
                    out / f"field_it{rec.index:03d}.json", {"xi": rec.xi_snapshot.tolist()}
                )
    if args.render:
        rc = pipe.render_cfg
        rng = rc.get("range")
        save_field_svg(
            out / "field.svg",
            pipe.mesh,
            sigma,
            value_range=tuple(rng) if rng else None,
            colormap=rc.get("colormap", "viridis"),
            size=int(rc.get("image_size", 640)),
            title="reconstructed conductivity",
        )
        save_field_figure(out / "field.png", pipe.mesh, sigma, title="reconstructed conductivity")
        save_trace_figure(out / "trace.png", state.trace)
    _say(
        args,
        f"reconstruction {'converged' if state.converged else 'stopped'} after "
        f"{state.iterations} iterations; outputs in {out}",
    )
    return 0


def cmd_bench(args) -> int:
    cfg, base = _load_config(args)
    pipe = Pipeline(cfg, base, quiet=args.quiet)
    backends = args.backends.split(",") if args.backends else list(BACKENDS)
    for b in backends:
        if b not in BACKENDS:
            raise ValidationError(f"unknown backend '{b}'")
    config = pipe.config
    if args.max_iterations:
        config = replace(config, max_outer_iterations=args.max_iterations, tolerance=1e-300)
    out = _outdir(args)
    rows = []
    results = {}
    summary = []
    for backend in backends:
        state = run_ias(
            pipe.measurement, pipe.system, pipe.op, pipe.hyper, replace(config, backend=backend)
        )
        results[backend] = [rec.inner_reports for rec in state.trace]
        rows.extend(_inner_rows(state))
        total = sum(rep.wall_time_ms for rec in state.trace for rep in rec.inner_reports)
        summary.append([backend, state.iterations, f"{total:.2f}"])
        _say(args, f"{backend}: {state.iterations} outer iterations, {total:.1f} ms in solves")
    atomic_write_csv(out / "bench.csv", INNER_CSV_HEADER, rows)
    atomic_write_csv(
        out / "bench_summary.csv", ["backend", "outer_iterations", "total_solve_ms"], summary
    )
    save_bench_figures(out / "bench_times.png", out / "bench_dims.png", results)
    _say(args, f"benchmark written to {out}")
    return 0


def cmd_convexity(args) -> int:
    cfg, base = _load_config(args)
    pipe = Pipeline(cfg, base, quiet=args.quiet)
    if pipe.hyper.r != 1:
        raise ValidationError("convexity probe requires the unit-exponent hypermodel")
    if pipe.measurement.noise_std <= 0:
        raise ValidationError("convexity probe requires a positive noise level")
    N = pipe.op.num_edges
    if args.state:
        raw = read_json(args.state)
        zeta = np.asarray(raw["zeta"], dtype=float)
        theta = np.asarray(raw["theta"], dtype=float)
        xi = np.asarray(raw["xi"], dtype=float) if "xi" in raw else None
    else:
        zeta, theta, xi = np.zeros(N), pipe.hyper.vartheta.copy(), None
    if xi is None:
        from .mesh import WeightedPseudoinverse

        xi = WeightedPseudoinverse(pipe.op, None).apply_to_increments(zeta)
    gamma = pipe.measurement.gamma(pipe.basis)
    report = convexity_probe(
        pipe.system,
        pipe.op,
        xi,
        gamma,
        omega=pipe.measurement.noise_std,
        zeta=zeta,
        theta=theta,
        eta=pipe.hyper.eta,
    )
    out = _outdir(args)
    atomic_write_json(out / "convexity.json", report.to_dict())
    _say(
        args,
        f"curvature probe: smallest Hessian eigenvalue {report.smallest_eigenvalue:.6e} "
        f"(norm {report.hessian_norm:.3e}), D min eig {report.d_smallest_eigenvalue:.3e}",
    )
    return 0


def cmd_compare(args) -> int:
    cfg, base = _load_config(args)
    pipe = Pipeline(cfg, base, quiet=args.quiet)
    report = compare_map_qmap(pipe.measurement, pipe.system, pipe.op, pipe.hyper, pipe.config)
    out = _outdir(args)
    rows = [
        [k + 1, f"{report.gibbs_reference[k]:.10e}", f"{report.gibbs_approximate[k]:.10e}",
         f"{report.delta_g[k]:.8e}"]
        for k in range(len(report.delta_g))
    ]
    atomic_write_csv(
        out / "delta_g.csv", ["iteration", "gibbs_reference", "gibbs_approximate", "delta_g"], rows
    )
    diff = np.concatenate(
        [report.difference_field(), np.zeros(pipe.mesh.num_triangles - pipe.sub.n)]
    )
    save_field_svg(out / "difference.svg", pipe.mesh, diff, diverging=True,
                   title="approximate minus reference")
    save_compare_figure(out / "delta_g.png", report.delta_g)
    tail = report.delta_g[-max(3, len(report.delta_g) // 3):]
    _say(
        args,
        f"objective gap asymptote {100 * float(np.mean(tail)):.2f}% over "
        f"{len(report.delta_g)} iterations; dynamic range ratio "
        f"{report.dynamic_range_ratio:.3f}; outputs in {out}",
    )
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eitias",
        description="Conductivity imaging from electrode voltage data: forward "
        "simulation and sparsity-promoting reconstruction.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
        p.add_argument("--seed", type=int, default=1, help="random seed where applicable")
        p.add_argument("--config", help="run-configuration JSON file")

    p = sub.add_parser("mesh", help="generate a disc tessellation with electrodes")
    common(p)
    p.add_argument("--electrodes", type=int, required=True)
    p.add_argument("--fill", type=float, required=True, help="boundary filling fraction in (0,1)")
    p.add_argument("--target", type=int, required=True, help="target element count")
    p.add_argument("--grading", type=float, default=3.0)
    p.add_argument("--d-radius", type=float, default=0.9)
    p.add_argument("--z0", type=float, default=1e-6, help="shared contact impedance")
    p.add_argument("--name", default="mesh.json", help="output file name")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("simulate", help="simulate electrode data for a phantom")
    common(p)
    p.add_argument("--mesh", required=True, help="data-mesh JSON file")
    p.add_argument("--phantom", required=True, help="phantom spec JSON file")
    p.add_argument("--noise", type=float, default=0.1, help="noise percent of max voltage")
    p.add_argument("--z0", type=float, default=1e-6)
    p.add_argument("--recon-mesh", help="reconstruction mesh (inverse-crime check)")
    p.add_argument("--name", default="measurement.json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="run the reconstruction pipeline")
    common(p)
    p.add_argument("--backend", choices=BACKENDS, help="override the inner solver")
    p.add_argument("--hybrid-r2", type=float, help="switch to this exponent after convergence")
    p.add_argument("--phase2-iterations", type=int, default=4)
    p.add_argument("--render", action="store_true", help="write field SVG/PNG and trace figure")
    p.add_argument("--snapshots", action="store_true", help="write per-iteration field files")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("bench", help="run every backend on the same problem and time it")
    common(p)
    p.add_argument("--backends", help="comma-separated subset of backends")
    p.add_argument("--max-iterations", type=int, help="fixed outer iteration count")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("convexity", help="curvature/Hessian diagnostics at a state")
    common(p)
    p.add_argument("--state", help="state JSON with zeta and theta (default: zero state)")
    p.set_defaults(func=cmd_convexity)

    p = sub.add_parser("compare", help="exact versus early-stopped inner solves")
    common(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except EitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
