"""Command line entry point: ``ervae <verb> [--config PATH] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ervae.config import config_to_dict, load_config
from ervae.errors import CertificationError, CheckpointError, ConfigError, NumericError, TrainingError

log = logging.getLogger("ervae")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3

BEGIN, END = "----- BEGIN {} -----", "----- END {} -----"


def _emit(name, text):
    print(BEGIN.format(name))
    print(text)
    print(END.format(name))


def resolve_out(args, cfg):
    """Output root: --out, then $ERVAE_OUT, then the config's output_dir."""
    return Path(args.out or os.environ.get("ERVAE_OUT") or cfg.output_dir)


def _load(args):
    cfg = load_config(args.config)
    if args.seed_override is not None:
        cfg.seeds = [args.seed_override]
        cfg.dataset.seed = args.seed_override
        cfg.wae.seed = args.seed_override
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1", "workers")
        cfg.workers = args.workers
    return cfg, resolve_out(args, cfg)


def cmd_gen_data(args):
    from ervae.experiment import write_datasets

    cfg, out = _load(args)
    tr, ev = write_datasets(cfg, out)
    _emit("GEN-DATA", json.dumps({"train": str(tr), "eval": str(ev)}, indent=2))
    return EXIT_OK


def cmd_train_wae(args):
    from ervae.experiment import CERT_FILE, EMBEDDING_FILE, train_and_certify_embedding

    cfg, out = _load(args)
    try:
        _, cert = train_and_certify_embedding(cfg, out)
    except CertificationError as exc:
        _emit("CERTIFICATION", json.dumps(exc.report, indent=2))
        log.error("%s; report kept at %s, no checkpoint written", exc, out / CERT_FILE)
        return EXIT_VERIFY
    _emit("CERTIFICATION", json.dumps({**cert.as_dict(), "checkpoint": str(out / EMBEDDING_FILE)}, indent=2))
    return EXIT_OK


def cmd_run_experiment(args):
    from ervae.experiment import render_table, run_experiment

    cfg, out = _load(args)
    report, records = run_experiment(cfg, out, cfg.workers)
    _emit("TABLE", render_table(report))
    failed = [r for r in records if r.status != "ok"]
    if failed:
        log.error("%d of %d runs failed: %s", len(failed), len(records),
                  ", ".join(f"{r.row}/seed{r.seed}" for r in failed))
        return EXIT_NUMERIC
    return EXIT_OK


def _verification_embedding(cfg, out):
    from ervae.embedding import load_embedding
    from ervae.experiment import EMBEDDING_FILE

    path = Path(cfg.verify.embedding) if cfg.verify.embedding else out / EMBEDDING_FILE
    if not path.exists():
        log.info("no learned embedding at %s; running f_proj checks only", path)
        return None, path
    return load_embedding(path), path


def cmd_verify(args):
    from ervae import verification as ver

    cfg, out = _load(args)
    checks = []
    try:
        learned, path = _verification_embedding(cfg, out)
    except CheckpointError as exc:
        learned, path = None, None
        checks.append(ver.Check(f"embedding checkpoint readable ({exc})", False, 1.0, 0.0))
    try:
        checks += ver.geometry_checks(learned)
    except NumericError as exc:
        checks.append(ver.Check(f"geometry on learned embedding ({exc})", False, 1.0, 0.0))
        learned = None
    checks += ver.kl_grid_checks(learned, cfg.verify.n_samples, seed=0)
    checks += ver.flow_grid_checks(cfg.verify.n_samples, seed=0)
    checks += ver.primitive_gradient_checks(cfg.verify.n_grad_probes)
    checks += ver.model_gradient_checks()
    out.mkdir(parents=True, exist_ok=True)
    payload = {"embedding": str(path) if path else None, "passed": all(c.passed for c in checks),
               "checks": [c.as_dict() for c in checks],
               "kl_records": [c.detail for c in checks if c.name.startswith(("KL identity", "flow"))]}
    (out / "verification.json").write_text(json.dumps(payload, indent=2, default=float))
    _emit("VERIFY", "\n".join(c.line() for c in checks))
    failures = [c.name for c in checks if not c.passed]
    if failures:
        log.error("verification failed: %s", "; ".join(failures))
        return EXIT_VERIFY
    return EXIT_OK


def cmd_report(args):
    from ervae.experiment import build_report, load_records, write_report
    from ervae.plots import render_figures

    cfg, out = _load(args)
    records = load_records(out)
    if not records:
        raise ConfigError(f"no run records under {out / 'runs'}; run run-experiment first", "out")
    report = build_report(records)
    text = write_report(report, out)
    figures = render_figures(out)
    _emit("TABLE", text)
    _emit("FIGURES", "\n".join(str(p) for p in figures))
    return EXIT_OK


def cmd_plot_data(args):
    from ervae.plots import export_plot_data

    cfg, out = _load(args)
    files = export_plot_data(out)
    _emit("PLOT-DATA", "\n".join(str(p) for p in files))
    return EXIT_OK


def cmd_show_config(args):
    import yaml

    cfg, _ = _load(args)
    _emit("CONFIG", yaml.safe_dump(config_to_dict(cfg), sort_keys=False).rstrip())
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "write the train/eval CSV datasets"),
    "train-wae": (cmd_train_wae, "train and certify the learned embedding"),
    "run-experiment": (cmd_run_experiment, "train every row x seed and write the table"),
    "verify": (cmd_verify, "run geometry, KL and gradient verification"),
    "report": (cmd_report, "rebuild the table from run records and render figures"),
    "plot-data": (cmd_plot_data, "write x/y series for external plotting"),
    "show-config": (cmd_show_config, "print the resolved config"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ervae", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None, help="YAML config (defaults if omitted)")
        p.add_argument("--seed-override", type=int, default=None,
                       help="replace the seed list (and data/WAE seeds) with this single seed")
        p.add_argument("--workers", type=int, default=None, help="parallel training processes")
        p.add_argument("--out", type=Path, default=None, help="output root (overrides $ERVAE_OUT)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except ConfigError as exc:
        where = f" [{exc.field}]" if exc.field else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CertificationError as exc:
        print(f"certification failed: {exc}\n{json.dumps(exc.report, indent=2)}", file=sys.stderr)
        return EXIT_VERIFY
    except (NumericError, TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
