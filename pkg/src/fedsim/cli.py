"""Config-driven command line front end.

Subcommands: `run` executes one experiment and writes a metrics table,
`partition` writes a partition manifest plus skew report, `compare` runs
several algorithms on the same seed/partition into one merged table, and
`report` summarizes a metrics file. Configs are flat `key=value` lines with
dotted section prefixes; `--set key=value` overrides file values.

Exit codes: 0 success, 1 runtime failure, 2 configuration/validation failure.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from .algorithms import FedLblConfig, FedNovaConfig
from .decentralized import MutualLossConfig
from .errors import ConfigError
from .simulator import (
    ALGORITHMS,
    DataConfig,
    DistillConfig,
    MetricsLog,
    PartitionConfig,
    SimConfig,
    Simulation,
    last_window_std,
)

METRICS_HEADER = ("round", "algorithm", "partition", "test_accuracy", "test_loss", "participants", "seed")

# key -> (parser, default). Unknown keys are rejected by name and line.
SCHEMA: dict[str, tuple] = {
    "algorithm": (str, "fedavg"),
    "clients": (int, 10),
    "participation": (float, 0.2),
    "local_epochs": (int, 1),
    "batch_size": (int, 64),
    "rounds": (int, 50),
    "local_eta": (float, 0.1),
    "weight_decay": (float, 0.004),
    "hidden_dims": (str, "16"),
    "weighting": (str, "uniform"),
    "seed": (int, 0),
    "eval_stride": (int, 1),
    "workers": (int, 1),
    "lambda": (float, 0.0),
    "fednova.alpha": (float, 0.1),
    "fednova.beta": (float, 0.5),
    "fednova.d_ref": (float, 0.01),
    "fedlbl.alpha": (float, 0.5),
    "fedlbl.nu": (float, 0.5),
    "fedlbl.threshold": (int, 2),
    "feddf.steps": (int, 50),
    "feddf.eta": (float, 0.05),
    "feddf.batch_size": (int, 64),
    "feddf.per_class": (int, 32),
    "peer.q": (int, 2),
    "peer.eta_shared": (float, 0.1),
    "peer.eta_local": (float, 0.1),
    "peer.kl_weight": (float, 1.0),
    "peer.loss": (str, "mse_onehot"),
    "data.kind": (str, "blobs"),
    "data.classes": (int, 4),
    "data.per_class": (int, 100),
    "data.dim": (int, 8),
    "data.spread": (float, 0.5),
    "data.scale": (float, 1.0),
    "data.per_octant": (int, 50),
    "data.sources": (int, 0),
    "data.source_shift": (float, 0.0),
    "data.test_fraction": (float, 0.25),
    "partition.strategy": (str, "iid"),
    "partition.q": (int, 1),
    "partition.beta": (float, 0.5),
    "partition.sigma_max": (float, 0.5),
    "out": (str, "metrics.csv"),
}


def _parse_value(key: str, raw: str, where: str):
    parser, _ = SCHEMA[key]
    try:
        return parser(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {key}={raw!r} as {parser.__name__}") from None


def parse_config_file(path: str) -> dict:
    """Read a key=value document; unknown keys fail with their line number."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path} line {lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{path} line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw, f"{path} line {lineno}")
    return values


def apply_overrides(values: dict, overrides: list[str]) -> dict:
    """`--set key=value` pairs take precedence over file values."""
    merged = dict(values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in SCHEMA:
            raise ConfigError(f"override: unknown key {key!r}")
        merged[key] = _parse_value(key, raw, "override")
    return merged


def _get(values: dict, key: str):
    return values.get(key, SCHEMA[key][1])


def _parse_hidden(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    try:
        return tuple(int(part) for part in raw.split(","))
    except ValueError:
        raise ConfigError(f"hidden_dims must be comma-separated integers, got {raw!r}") from None


def build_sim_config(values: dict) -> SimConfig:
    """Assemble the typed experiment config from a flat key/value mapping."""
    return SimConfig(
        algorithm=_get(values, "algorithm"),
        num_clients=_get(values, "clients"),
        participation=_get(values, "participation"),
        local_epochs=_get(values, "local_epochs"),
        batch_size=_get(values, "batch_size"),
        rounds=_get(values, "rounds"),
        local_eta=_get(values, "local_eta"),
        weight_decay=_get(values, "weight_decay"),
        hidden_dims=_parse_hidden(_get(values, "hidden_dims")),
        weighting=_get(values, "weighting"),
        prox_lambda=_get(values, "lambda"),
        fednova=FedNovaConfig(
            alpha_scale=_get(values, "fednova.alpha"),
            beta_floor=_get(values, "fednova.beta"),
            d_ref=_get(values, "fednova.d_ref"),
        ),
        fedlbl=FedLblConfig(
            alpha=_get(values, "fedlbl.alpha"),
            nu=_get(values, "fedlbl.nu"),
            label_threshold=_get(values, "fedlbl.threshold"),
        ),
        distill=DistillConfig(
            steps=_get(values, "feddf.steps"),
            eta=_get(values, "feddf.eta"),
            batch_size=_get(values, "feddf.batch_size"),
            per_class=_get(values, "feddf.per_class"),
        ),
        peer_q=_get(values, "peer.q"),
        mutual=MutualLossConfig(
            eta_shared=_get(values, "peer.eta_shared"),
            eta_local=_get(values, "peer.eta_local"),
            kl_weight=_get(values, "peer.kl_weight"),
            classification_loss=_get(values, "peer.loss"),
        ),
        data=DataConfig(
            kind=_get(values, "data.kind"),
            num_classes=_get(values, "data.classes"),
            per_class=_get(values, "data.per_class"),
            dim=_get(values, "data.dim"),
            spread=_get(values, "data.spread"),
            scale=_get(values, "data.scale"),
            per_octant=_get(values, "data.per_octant"),
            num_sources=_get(values, "data.sources"),
            source_shift=_get(values, "data.source_shift"),
            test_fraction=_get(values, "data.test_fraction"),
        ),
        partition=PartitionConfig(
            strategy=_get(values, "partition.strategy"),
            labels_per_client=_get(values, "partition.q"),
            beta=_get(values, "partition.beta"),
            sigma_max=_get(values, "partition.sigma_max"),
        ),
        master_seed=_get(values, "seed"),
        eval_stride=_get(values, "eval_stride"),
        workers=_get(values, "workers"),
    )


def metrics_rows(log: MetricsLog, config: SimConfig) -> list[tuple]:
    label = config.partition.label()
    return [
        (
            r.round_index,
            config.algorithm,
            label,
            repr(r.test_accuracy),
            repr(r.test_loss),
            ";".join(str(p) for p in r.participants),
            config.master_seed,
        )
        for r in log.records
    ]


def write_metrics(rows: list[tuple], path: str) -> None:
    out = Path(path)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        writer.writerows(rows)


def _load_values(args) -> dict:
    values = parse_config_file(args.config)
    values = apply_overrides(values, args.set or [])
    if args.out is not None:
        values["out"] = args.out
    return values


def cmd_run(args) -> int:
    values = _load_values(args)
    config = build_sim_config(values)
    log = Simulation(config).run()
    out = _get(values, "out")
    write_metrics(metrics_rows(log, config), out)
    print(f"wrote {len(log.records)} rounds to {out}")
    return 0


def cmd_partition(args) -> int:
    values = _load_values(args)
    config = build_sim_config(values)
    sim = Simulation(config)
    out = Path(_get(values, "out"))
    manifest = datamod.partition_manifest(sim.train_set, sim.partition)
    out.write_text(manifest + "\n")
    report = datamod.skew_report(sim.train_set, sim.partition)
    skew_path = out.with_name(out.stem + "_skew" + (out.suffix or ".txt"))
    skew_path.write_text(report.format_table() + "\n")
    print(report.format_table())
    print(f"wrote manifest to {out} and skew table to {skew_path}")
    return 0


def cmd_compare(args) -> int:
    if len(args.algorithms) < 2:
        raise ConfigError("compare needs at least two algorithms")
    for name in args.algorithms:
        if name not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {name!r}, expected one of {ALGORITHMS}")
    values = _load_values(args)
    rows: list[tuple] = []
    summary = []
    for name in args.algorithms:
        config = build_sim_config({**values, "algorithm": name})
        log = Simulation(config).run()
        rows.extend(metrics_rows(log, config))
        summary.append((name, log.final_accuracy()))
    out = _get(values, "out")
    write_metrics(rows, out)
    for name, final in summary:
        print(f"{name}: final_accuracy={final}")
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def read_metrics(path: str) -> dict[str, list[dict]]:
    """Metrics rows grouped by algorithm; malformed files are config errors."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != METRICS_HEADER:
                raise ConfigError(f"{path}: expected header {','.join(METRICS_HEADER)}")
            groups: dict[str, list[dict]] = {}
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(METRICS_HEADER):
                    raise ConfigError(f"{path} line {lineno}: expected {len(METRICS_HEADER)} fields")
                try:
                    record = {
                        "round": int(row[0]),
                        "test_accuracy": float(row[3]),
                        "test_loss": float(row[4]),
                    }
                except ValueError:
                    raise ConfigError(f"{path} line {lineno}: malformed numeric field") from None
                groups.setdefault(row[1], []).append(record)
    except OSError as exc:
        raise ConfigError(f"cannot read metrics {path}: {exc}") from None
    if not groups:
        raise ConfigError(f"{path}: no data rows")
    return groups


def cmd_report(args) -> int:
    groups = read_metrics(args.metrics)
    for name, rows in groups.items():
        accs = [r["test_accuracy"] for r in rows]
        best = int(np.argmax(accs))
        print(
            f"algorithm={name} final_accuracy={accs[-1]} "
            f"best_accuracy={accs[best]} best_round={rows[best]['round']} "
            f"oscillation={last_window_std(accs)}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", required=True, help="key=value experiment file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--out", help="output path (overrides the config's `out`)")

    p_run = sub.add_parser("run", help="run one experiment and write a metrics table")
    add_config_args(p_run)
    p_run.set_defaults(func=cmd_run)

    p_part = sub.add_parser("partition", help="write the partition manifest and skew report")
    add_config_args(p_part)
    p_part.set_defaults(func=cmd_partition)

    p_cmp = sub.add_parser("compare", help="run several algorithms on one seed/partition")
    add_config_args(p_cmp)
    p_cmp.add_argument("--algorithms", nargs="+", required=True)
    p_cmp.set_defaults(func=cmd_compare)

    p_rep = sub.add_parser("report", help="summarize a metrics file")
    p_rep.add_argument("metrics", help="metrics CSV produced by run/compare")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
