"""Command line: ``fedcd generate | run | compare``.

On failure the last line on stderr is a JSON object
``{"error": ..., "stage": ...}`` and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import data as D
from . import harness as H


def _spec_from_file(path) -> D.SyntheticSpec:
    """Accept a bare synthetic spec or a full experiment config."""
    values = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    if "data" in values:
        cfg = H.config_from_dict(values)
        return cfg.data.synthetic.to_spec()
    allowed = {f.name for f in dataclasses.fields(H.SyntheticConfig)}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise H.ConfigError(f"unknown config key {unknown[0]!r}")
    return H.SyntheticConfig(**values).to_spec()


def cmd_generate(args) -> list[Path]:
    spec = _spec_from_file(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synth = D.generate_synthetic(spec, args.seed)
    paths = [out / "logs.csv", out / "qmatrix.csv", out / "latents.csv"]
    D.write_logs(paths[0], synth.logs, synth.catalog)
    D.write_qmatrix(paths[1], synth.qmatrix, synth.catalog)
    D.write_latents(paths[2], synth.mastery, synth.catalog)
    return paths


def cmd_run(args) -> list[Path]:
    config = H.load_config(args.config, args.set or ())
    out = Path(args.out or config.output_dir)
    H.run_experiment(config, out, seeds=args.seeds)
    return [out / "run_record.json"]


def cmd_compare(args) -> list[Path]:
    records = [H.load_record(p) for p in args.records]
    text = H.format_table(H.compare_records(records))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        return [Path(args.out)]
    sys.stdout.write(text)
    return []


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedcd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset (logs, Q-matrix, latents)")
    g.add_argument("--config", help="synthetic spec or experiment config (JSON)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run an experiment config over its seeds")
    r.add_argument("--config", help="experiment config (JSON); defaults apply when omitted")
    r.add_argument("--seeds", type=int, nargs="+", help="override the config's seed list")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path override, repeatable")
    r.add_argument("--out", help="output directory (default: config output_dir)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="tabulate several run records side by side")
    c.add_argument("records", nargs="+", help="run_record.json files or run directories")
    c.add_argument("--config", help="unused; accepted for interface symmetry")
    c.add_argument("--seeds", type=int, nargs="+", help="unused; accepted for interface symmetry")
    c.add_argument("--out", help="write the table here instead of stdout")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        paths = args.func(args)
    except H.StageError as e:
        print(json.dumps({"error": str(e.cause), "stage": e.stage}), file=sys.stderr)
        return 2
    except (H.ConfigError, ValueError, OSError) as e:
        stage = "config" if isinstance(e, H.ConfigError) else args.command
        print(json.dumps({"error": str(e), "stage": stage}), file=sys.stderr)
        return 1
    for path in paths:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
