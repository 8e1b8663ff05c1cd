"""Command-line experiment runner.

    sparsezo run <config>
    sparsezo mask <config> -o <path>
    sparsezo compare <config>
    sparsezo gradip <config>

Outputs go to the config's ``output_dir`` unless ``SPARSEZO_OUTPUT_DIR`` is
set. Exit codes: 0 success, 2 invalid config, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigValidationError, ExperimentConfig, build_federation, load_config
from .federation import ClientFailure, calibrate, communication_cost, run_federation
from .gradip import write_trajectories_csv
from .masking import save_mask
from .scenarios import MASK_KINDS
from .zo import NumericalError

__all__ = [
    "main", "cmd_run", "cmd_mask", "cmd_compare", "cmd_gradip",
    "compare_rows", "write_compare_csv", "OUTPUT_ENV",
]

logger = logging.getLogger("sparsezo")

OUTPUT_ENV = "SPARSEZO_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
COMPARE_COLUMNS = (
    "mask", "density", "support_size", "final_loss", "final_gap",
    "up_bytes", "down_bytes", "total_bytes",
)
CLASSIFICATION_COLUMNS = (
    "client_id", "flagged", "init_avg", "later_avg", "rho_later_client", "rho_quie_client",
)


class RunFailed(RuntimeError):
    """Numerical failure after partial outputs were written."""


def output_dir(cfg: ExperimentConfig) -> Path:
    out = Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(x):
    return "" if x is None else repr(float(x))


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_classifications(results, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CLASSIFICATION_COLUMNS)
        for c in results:
            writer.writerow(
                [c.client_id, int(c.flagged), repr(c.init_avg), repr(c.later_avg),
                 repr(c.rho_later_client), repr(c.rho_quie_client)]
            )


def cmd_run(cfg: ExperimentConfig) -> Path:
    """Train, then write ``metrics.csv`` and ``summary.json`` (plus GradIP files with vp)."""
    fed = build_federation(cfg)
    metrics = run_federation(
        cfg.round_config(), fed.server, fed.clients, fed.evaluate,
        f_star=fed.f_star, vp=cfg.vp_config(), pretrain_grad=fed.pretrain_grad,
    )
    out = output_dir(cfg)
    metrics.write_csv(out / "metrics.csv")
    if metrics.trajectories:
        write_trajectories_csv(metrics.trajectories, out / "gradip_trajectories.csv")
        _write_classifications(metrics.classifications, out / "classification.csv")
    last = metrics.records[-1]
    _write_json(
        out / "summary.json",
        {
            "rounds_completed": last["round"],
            "final_loss": last["global_loss"],
            "final_gap": last["gap"],
            "up_bytes_total": last["up_bytes"],
            "down_bytes_total": last["down_bytes"],
            "flagged_clients": list(last["flagged"]),
            "failure": metrics.failure,
        },
    )
    if metrics.failure:
        raise RunFailed(metrics.failure)
    return out


def cmd_mask(cfg: ExperimentConfig, path) -> Path:
    fed = build_federation(cfg)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_mask(fed.server.mask, path)
    return path


def compare_rows(cfg: ExperimentConfig, kinds=None):
    """One row per mask kind, all under the same seed, T and R.

    Communication bytes are per client per round; the ``full`` row is
    priced as a full-parameter exchange.
    """
    if kinds is None:
        kinds = list(cfg.compare.baselines) if cfg.compare else list(MASK_KINDS)
    rcfg = cfg.round_config()
    rows = []
    for kind in kinds:
        fed = build_federation(cfg, mask_kind=kind)
        metrics = run_federation(
            rcfg, fed.server, fed.clients, fed.evaluate,
            f_star=fed.f_star, vp=cfg.vp_config(), pretrain_grad=fed.pretrain_grad,
        )
        if metrics.failure:
            raise RunFailed(f"{kind}: {metrics.failure}")
        mask = fed.server.mask
        scheme = "full" if kind == "full" else "sparse"
        up, down = communication_cost(
            rcfg, mask.dim, mask.density, scheme=scheme, support_size=mask.size
        )
        last = metrics.records[-1]
        rows.append(
            {
                "mask": kind,
                "density": mask.density,
                "support_size": mask.size,
                "final_loss": last["global_loss"],
                "final_gap": last["gap"],
                "up_bytes": up,
                "down_bytes": down,
                "total_bytes": up + down,
            }
        )
    return rows


def write_compare_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARE_COLUMNS)
        for r in rows:
            writer.writerow(
                [r["mask"], repr(float(r["density"])), r["support_size"], _fmt(r["final_loss"]),
                 _fmt(r["final_gap"]), r["up_bytes"], r["down_bytes"], r["total_bytes"]]
            )


def cmd_compare(cfg: ExperimentConfig) -> Path:
    rows = compare_rows(cfg)
    out = output_dir(cfg)
    write_compare_csv(rows, out / "compare.csv")
    for r in rows:
        print(f"{r['mask']:>16}  loss={r['final_loss']:.6g}  bytes/round={r['total_bytes']}")
    return out


def cmd_gradip(cfg: ExperimentConfig) -> Path:
    """Calibration phase only: one trajectory CSV per client plus classifications."""
    if cfg.vp is None:
        raise ConfigValidationError("vp: section required for the gradip command")
    fed = build_federation(cfg)
    metrics, _, _ = calibrate(
        fed.server, fed.clients, cfg.vp_config(), cfg.round_config().zo, fed.pretrain_grad
    )
    out = output_dir(cfg)
    for traj in metrics.trajectories:
        write_trajectories_csv([traj], out / f"gradip_client{traj.client_id}.csv")
    _write_classifications(metrics.classifications, out / "classification.csv")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsezo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("run", "run a federation and write metrics"),
        ("mask", "build the sparse mask and write it to a file"),
        ("compare", "run every configured mask kind and tabulate"),
        ("gradip", "run the calibration phase and write GradIP trajectories"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="experiment config (JSON)")
        if name == "mask":
            p.add_argument("-o", "--output", required=True, help="mask file to write")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
        if args.command == "run":
            out = cmd_run(cfg)
        elif args.command == "mask":
            out = cmd_mask(cfg, args.output)
        elif args.command == "compare":
            out = cmd_compare(cfg)
        else:
            out = cmd_gradip(cfg)
    except ConfigValidationError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunFailed, ClientFailure, NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    logger.info("wrote %s", out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
