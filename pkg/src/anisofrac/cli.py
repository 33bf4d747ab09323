"""Command-line interface: ``anisofrac run|point|polar|mesh``."""

import argparse
import logging
import os
import sys

from .errors import AnisofracError, ConfigError, GeometryError

log = logging.getLogger("anisofrac")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def _parser():
    p = argparse.ArgumentParser(prog="anisofrac", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("run", "fracture simulation of a notched specimen"),
                       ("point", "material-point relaxation record"),
                       ("polar", "crack-driving energy over load angles"),
                       ("mesh", "write the job's mesh as VTK")):
        s = sub.add_parser(name, help=text)
        s.add_argument("config", help="job file ('-' reads stdin)")
        s.add_argument("--threads", type=int, default=None, help="worker threads")
        s.add_argument("--output-dir", default=None, help="override [output] directory")
        s.add_argument("--quiet", action="store_true", help="only report errors")
        if name == "mesh":
            s.add_argument("--out", required=True, help="VTK file to write")
    return p


def _load(path, kind):
    from .appio import parse_config

    try:
        if path == "-":
            return parse_config(sys.stdin.read(), source="<stdin>", kind=kind)
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read(), source=path, kind=kind)
    except OSError as exc:
        raise ConfigError(f"cannot read job file: {exc.strerror}", source=path) from exc
    except UnicodeDecodeError as exc:
        raise ConfigError("job file is not UTF-8 text", source=path) from exc


def _with_threads(job, threads):
    from dataclasses import replace

    if threads is None:
        return job
    if threads < 1:
        raise ConfigError("--threads must be positive", source="<command line>")
    return replace(job, solver=replace(job.solver, threads=threads))


def _out_dir(job, args):
    d = args.output_dir if args.output_dir is not None else job.output.directory
    os.makedirs(d, exist_ok=True)
    return d


def _cmd_run(args):
    from .appio import run_job

    job = _with_threads(_load(args.config, "sim"), args.threads)

    def progress(row):
        log.info("step %d  u = %.6g mm  F = %.6g N  newton %d", row.step, row.displacement,
                 row.force, row.newton_iters)

    _, report = run_job(job, output_dir=_out_dir(job, args), progress=progress)
    force, disp = report.peak()
    log.info("peak force %.6g N at %.6g mm", force, disp)


def _cmd_point(args):
    from .appio import run_point, write_csv
    from .appio.drivers import POINT_HEADER

    job = _with_threads(_load(args.config, "polar"), args.threads)
    rows = run_point(job)
    path = os.path.join(_out_dir(job, args), job.output.csv or "point.csv")
    write_csv(path, POINT_HEADER, rows)
    log.info("wrote %d rows to %s", len(rows), path)


def _cmd_polar(args):
    from .appio import run_polar, write_csv
    from .appio.drivers import POLAR_HEADER

    job = _with_threads(_load(args.config, "polar"), args.threads)
    rows = run_polar(job)
    path = os.path.join(_out_dir(job, args), job.output.csv or "polar.csv")
    write_csv(path, POLAR_HEADER, rows)
    log.info("wrote %d rows to %s", len(rows), path)


def _cmd_mesh(args):
    from .appio import generate_mesh, write_vtk
    from .fem import FieldState

    job = _load(args.config, "sim")
    mesh = generate_mesh(job.geometry, job.fibers)
    write_vtk(mesh, FieldState.initial(mesh), args.out, title="anisofrac mesh")
    log.info("wrote %d nodes, %d elements to %s", mesh.n_nodes, mesh.n_elements, args.out)


_COMMANDS = {"run": _cmd_run, "point": _cmd_point, "polar": _cmd_polar, "mesh": _cmd_mesh}


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        _COMMANDS[args.command](args)
    except (ConfigError, GeometryError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except AnisofracError as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
