"""``pdectrl`` command line: data generation, training, control and reports."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import container, experiments, pde
from .bound import verify_bound
from .config import ConfigError, RunConfig
from .control import write_history_csv
from .trainer import TrainingDiverged, load_checkpoint, save_checkpoint, write_metrics_csv

log = logging.getLogger("pdectrl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

USAGE_EXAMPLE = """\
example config:

  [problem]
  kind = poisson
  resolution = 32

  [phase1]
  epochs = 50
"""


class Outputs:
    """Tracks files written by a command so a failure can remove them."""

    def __init__(self, root: Path):
        self.root = root
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        return self.root / name

    def _track(self, path: Path):
        if path not in self.written:
            self.written.append(path)

    def container(self, name, arrays, meta=None) -> Path:
        p = self.path(name)
        self._track(p)
        container.save(p, arrays, meta)
        return p

    def csv(self, name, header, rows) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        p = self.path(name)
        self._track(p)
        container.atomic_write(p, buf.getvalue().encode())
        return p

    def history(self, name, history) -> Path:
        p = self.path(name)
        self._track(p)
        write_history_csv(history, p)
        return p

    def metrics(self, name, history) -> Path:
        p = self.path(name)
        self._track(p)
        write_metrics_csv(history, p)
        return p

    def checkpoint(self, name, model, extra=None) -> Path:
        p = self.path(name)
        self._track(p)
        save_checkpoint(model, p, extra)
        return p

    def cleanup(self):
        for p in self.written:
            try:
                p.unlink()
            except FileNotFoundError:
                pass


def _threads(arg: int | None) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("PDECTRL_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"PDECTRL_THREADS must be an integer, got {env!r}") from None
    return 1


def _dataset(cfg: RunConfig, out: Outputs) -> dict[str, np.ndarray]:
    path = cfg["paths"]["data"]
    if path:
        arrays, meta = container.load(path)
        if meta.get("kind") != cfg.kind:
            raise ConfigError(f"{path} holds {meta.get('kind')!r} data, config is {cfg.kind!r}")
        return arrays
    return experiments.generate_dataset(cfg)


def _model(cfg: RunConfig, out: Outputs):
    path = cfg["paths"]["checkpoint"]
    if path:
        return load_checkpoint(path)
    log.info("no checkpoint configured; training one")
    model = experiments.train_surrogate(cfg, _dataset(cfg, out))
    out.checkpoint("checkpoint.pdec", model, {"kind": cfg.kind})
    return model


def cmd_gen_data(cfg, out):
    data = experiments.generate_dataset(cfg)
    meta = {"kind": cfg.kind, "resolution": cfg["problem"]["resolution"], "seed": cfg["problem"]["seed"]}
    p = out.container("data.pdec", data, meta)
    print(f"wrote {p} ({', '.join(f'{k}{list(v.shape)}' for k, v in data.items())})")


def cmd_train(cfg, out):
    model = experiments.train_surrogate(cfg, _dataset(cfg, out))
    out.checkpoint("checkpoint.pdec", model, {"kind": cfg.kind})
    out.metrics("metrics.csv", model.history_)
    best = min((r["test_rel_error"] for r in model.history_), default=float("nan"))
    print(f"wrote {out.path('checkpoint.pdec')}; best test relative error {best:.4g}")


def _single_case(cfg):
    case = experiments.benchmark_cases(cfg)[0]
    m0 = experiments.initial_control(cfg["phase2"]["m_init"], case.problem.grid, case.problem.control_shape)
    return case, m0


def _write_run(out, prefix, rec):
    out.container(f"{prefix}.pdec", {"m": rec.m},
                  {"method": rec.method, "objective": repr(rec.objective), "m_init": rec.m_init})
    out.history(f"{prefix}_history.csv", rec.history)
    print(f"{rec.method}: objective {rec.objective:.6g}, Rel(m,m*) {rec.rel_m:.4g}, "
          f"{rec.iterations} iterations, {rec.wall_time:.3f}s")


def cmd_control(cfg, out):
    model = _model(cfg, out)
    case, m0 = _single_case(cfg)
    rec = experiments.run_method("surrogate", case, m0, cfg, model, cfg["phase2"]["m_init"])
    _write_run(out, "control", rec)


def cmd_adjoint(cfg, out):
    case, m0 = _single_case(cfg)
    rec = experiments.run_method("adjoint", case, m0, cfg, None, cfg["phase2"]["m_init"])
    _write_run(out, "adjoint", rec)


def cmd_compare(cfg, out):
    model = _model(cfg, out)
    records = experiments.compare(cfg, model)
    out.csv("report.csv", experiments.REPORT_COLUMNS, experiments.report_rows(cfg.kind, records))
    out.csv("timing.csv", experiments.TIMING_COLUMNS, experiments.timing_rows(cfg.kind, records))
    for row in experiments.report_rows(cfg.kind, records):
        print(f"{row[1]:>14} {row[2]:>9}: objective {row[4]:.4g} +- {row[5]:.2g}, Rel(m,m*) {row[6]:.4g}")


def cmd_verify_bound(cfg, out):
    if cfg.kind != "poisson":
        raise ConfigError("verify-bound runs on the Poisson problem")
    paths = cfg["paths"]["checkpoints"]
    if paths:
        checkpoints = [load_checkpoint(p) for p in paths]
        labels = list(paths)
    else:
        checkpoints, labels = _snapshots(cfg, out)
    grid, _ = experiments.grid_and_spec(cfg)
    rng = np.random.default_rng([cfg["problem"]["seed"], 2])
    samples = np.array([pde.sample_fourier_control(rng, grid) for _ in range(cfg["problem"]["samples"])])
    pairs = list(zip(samples[::2], samples[1::2]))
    case, m0 = _single_case(cfg)
    report = verify_bound(checkpoints, case.problem, m0, samples, pairs,
                          experiments.lbfgs_config(cfg), labels)
    rows = [[e.label, e.eps, e.eps_mean, e.lipschitz, e.control_error, e.bound_rhs] for e in report.estimates]
    out.csv("bound.csv", ("checkpoint", "eps", "eps_mean", "lipschitz", "control_error", "bound_rhs"), rows)
    for r in rows:
        print(f"{r[0]:>8}: eps {r[1]:.4g}  control error {r[4]:.4g}  bound {r[5]:.4g}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"verdict {verdict}: eps decreasing={report.eps_decreasing}, inversions={report.inversions}, "
          f"bound holds={report.bound_holds}")


def _snapshots(cfg, out):
    """Train once, keeping copies at the configured epochs plus the best."""
    import copy

    wanted = sorted(set(cfg["phase1"]["snapshot_epochs"]))
    snaps = {}

    def on_epoch(epoch, net):
        if epoch + 1 in wanted:
            snaps[epoch + 1] = copy.deepcopy(net.state_dict())

    model = experiments.train_surrogate(cfg, _dataset(cfg, out), on_epoch=on_epoch)
    checkpoints, labels = [], []
    for ep in wanted:
        if ep in snaps:
            m = copy.deepcopy(model)
            m.network_.load_state_dict(snaps[ep])
            checkpoints.append(m)
            labels.append(f"epoch{ep}")
    checkpoints.append(model)
    labels.append("best")
    for m, label in zip(checkpoints, labels):
        out.checkpoint(f"checkpoint_{label}.pdec", m, {"kind": cfg.kind})
    return checkpoints, labels


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "control": cmd_control,
    "adjoint": cmd_adjoint,
    "compare": cmd_compare,
    "verify-bound": cmd_verify_bound,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pdectrl", description="Surrogate-based PDE optimal control.",
                                 epilog=USAGE_EXAMPLE, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="sectioned key = value config file")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override a config value (repeatable)")
    ap.add_argument("--seed", type=int, help="seed for data, training and benchmark sampling")
    ap.add_argument("--threads", type=int, help="torch threads (default: $PDECTRL_THREADS or 1)")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Outputs(Path(args.out))
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides += [f"problem.seed={args.seed}", f"phase1.seed={args.seed}"]
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        if not text.strip() and not overrides:
            ap.print_usage(sys.stderr)
            print(f"pdectrl: error: config {args.config} is empty\n\n{USAGE_EXAMPLE}", file=sys.stderr)
            return EXIT_CONFIG
        cfg = RunConfig.from_text(text, overrides)
        threads = _threads(args.threads)
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(True)
        out.root.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
        (out.root / "config.used").write_text(cfg.to_text())
        return EXIT_OK
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except (OSError, container.ContainerError) as exc:
        code, msg = EXIT_IO, f"I/O error: {exc}"
    except (pde.SolverError, TrainingDiverged, FloatingPointError, ValueError) as exc:
        code, msg = EXIT_NUMERIC, f"numerical failure: {exc}"
    out.cleanup()
    print(f"pdectrl: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
