"""Command-line entry point.

Every subcommand writes a JSON run manifest next to its outputs (command,
resolved config, seed, input digests, version, outputs). Exit codes: 0 on
success, 2 for user/config errors, 3 for I/O errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import __version__
from .audit import MULTIPLE_CHOICE, OPEN, TABLE_COLUMNS, audit_corpus, format_table, read_audit_items, write_audit_items
from .calibration import EmptyBucket, GridSpec, builtin_rules, fit_policy, load_policy, load_rules, save_policy
from .export import (SCATTER_COLUMNS, ablation_grid, conditional_table, distribution_table, fmt,
                     report_rows, REPORT_COLUMNS, scatter_points, write_csv, write_json)
from .features import write_binary, write_jsonl
from .losses import ProjectionHead, read_loss_records, record_losses, stage
from .paths import PATHS, Path
from .planner import (AllSamplesFiltered, EmptyDataset, TrainConfig, config_dict, forward, load_model,
                      save_model, train)
from .records import MissingField, feature_matrix, outcome_matrix, read_records, token_matrix, write_records
from .routing import (BucketOnly, Calibrated, EmptyRecordSet, External, Fixed, ModelOnly, Oracle, Random,
                      evaluate, record_bucket)
from .synth import config_to_json, generate, generate_audit_corpus, load_config, preset, with_overrides

log = logging.getLogger("pathroute")

EXIT_OK, EXIT_USER, EXIT_IO = 0, 2, 3


class UserError(Exception):
    pass


# --- manifests --------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, config: dict, seed, inputs, outputs) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": {p: sha256_file(p) for p in inputs if p},
        "outputs": {p: sha256_file(p) for p in outputs},
    }
    write_json(path, manifest)


def _manifest_path(args, primary: str) -> str:
    return args.manifest or primary + ".manifest.json"


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise UserError(f"{path}: invalid JSON ({exc})") from None


# --- gen ------------------------------------------------------------------------

def cmd_gen(args) -> None:
    if (args.preset is None) == (args.config is None):
        raise UserError("give exactly one of --preset or --config")
    if args.preset is not None:
        cfg = preset(args.preset, seed=args.seed, records_per_domain=args.n, D=args.block_dim)
    else:
        cfg = with_overrides(load_config(args.config), seed=args.seed, records_per_domain=args.n)
    cfg = with_overrides(cfg, rho=args.rho)
    records = generate(cfg)
    if args.split != "all":
        keep = {d.domain_id for d in cfg.domains if d.split == args.split}
        records = [r for r in records if r.dataset in keep]

    outputs = [args.out]
    if args.sidecar != "none":
        ext = ".features.bin" if args.sidecar == "binary" else ".features.jsonl"
        side = args.out + ext
        X = feature_matrix(records)
        if args.sidecar == "binary":
            write_binary(side, X)
        else:
            write_jsonl(side, [r.id for r in records], X)
        name = os.path.basename(side)
        for k, r in enumerate(records):
            r.features_ref = {"file": name, "index": k} if args.sidecar == "binary" else {"file": name}
        outputs.append(side)
    write_records(args.out, records)

    config = config_to_json(cfg)
    config["split"] = args.split
    config["sidecar"] = args.sidecar
    write_manifest(_manifest_path(args, args.out), "gen", config, cfg.seed,
                   [args.config], outputs)
    print(f"wrote {len(records)} records to {args.out}")


# --- train ----------------------------------------------------------------------

_TRAIN_FLAGS = {"lr": "learning_rate", "batch": "batch_size", "decay": "weight_decay",
                "epochs": "epochs", "hidden": "hidden", "val_fraction": "val_fraction"}


def resolve_train_config(args) -> TrainConfig:
    """Flags override the config file, which overrides the built-in defaults."""
    values = {}
    if args.config:
        known = {f.name for f in fields(TrainConfig)}
        raw = _read_json(args.config)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise UserError(f"{args.config}: unknown train config keys {unknown}")
        values.update(raw)
    for flag, name in _TRAIN_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            values[name] = v
    values["seed"] = args.seed
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid train config: {exc}") from None


def cmd_train(args) -> None:
    cfg = resolve_train_config(args)
    records = read_records(args.records)
    if not records:
        raise UserError(f"{args.records}: no records")
    try:
        result = train(feature_matrix(records), outcome_matrix(records), cfg,
                       ids=[r.id for r in records])
    except (EmptyDataset, AllSamplesFiltered) as exc:
        raise UserError(str(exc)) from None
    save_model(result.model, args.out)
    history = args.history or os.path.splitext(args.out)[0] + ".history.csv"
    write_csv(history, ["epoch", "train_loss", "val_utility"], [asdict(h) for h in result.history])
    config = config_dict(cfg)
    config.update(best_epoch=result.best_epoch, n_filtered=result.n_filtered,
                  n_train=result.n_train, n_val=result.n_val)
    write_manifest(_manifest_path(args, args.out), "train", config, cfg.seed,
                   [args.records, args.config], [args.out, history])
    best = result.history[result.best_epoch - 1]
    print(f"best epoch {result.best_epoch}: val_utility {fmt(best.val_utility)} "
          f"({result.n_filtered} all-fail samples removed)")


# --- calibrate ------------------------------------------------------------------

def _rules(path):
    return load_rules(path) if path else builtin_rules()


def cmd_calibrate(args) -> None:
    records = read_records(args.records)
    if not records:
        raise UserError(f"{args.records}: no records")
    model = load_model(args.model)
    rules = _rules(args.rules)
    grid = GridSpec.trivial() if args.grid == "trivial" else GridSpec()
    try:
        buckets = [record_bucket(r, rules) for r in records]
        policy = fit_policy(forward(model, feature_matrix(records)), outcome_matrix(records),
                            token_matrix(records), buckets, rules, grid)
    except EmptyBucket as exc:
        raise UserError(str(exc)) from None
    save_policy(policy, args.out)
    config = {"grid": args.grid, "rules": args.rules or "builtin"}
    write_manifest(_manifest_path(args, args.out), "calibrate", config, None,
                   [args.records, args.model, args.rules], [args.out])
    for b, p in sorted(policy.policies.items()):
        print(f"{b}: tau={p.temperature} margin={p.margin} default={p.default_path.value}")


# --- eval -----------------------------------------------------------------------

POLICY_NAMES = ("fixed", "random", "model", "bucket", "calibrated", "oracle", "external")


def build_policies(names, args):
    model = load_model(args.model) if args.model else None
    cal = load_policy(args.policy) if args.policy else None
    out = []
    for name in names:
        if name == "fixed":
            out.extend(Fixed(p) for p in PATHS)
        elif name in {p.value for p in PATHS}:
            out.append(Fixed(Path.parse(name)))
        elif name == "random":
            out.append(Random(args.seed))
        elif name == "oracle":
            out.append(Oracle())
        elif name == "external":
            out.append(External())
        elif name == "model":
            if model is None:
                raise UserError("policy 'model' needs --model")
            out.append(ModelOnly(model))
        elif name == "calibrated":
            if model is None or cal is None:
                raise UserError("policy 'calibrated' needs --model and --policy")
            out.append(Calibrated(model, cal))
        elif name == "bucket":
            if cal is None or not cal.bucket_paths:
                raise UserError("policy 'bucket' needs a --policy file with bucket_paths")
            out.append(BucketOnly(cal.rules, cal.bucket_paths))
        else:
            raise UserError(f"unknown policy {name!r}; choose from {', '.join(POLICY_NAMES)} or a path id")
    return out


def cmd_eval(args) -> None:
    records = read_records(args.records)
    names = [n.strip() for n in args.policies.split(",") if n.strip()]
    policies = build_policies(names, args)
    try:
        reports = [evaluate(p, records) for p in policies]
    except (MissingField, EmptyRecordSet) as exc:
        raise UserError(str(exc)) from None

    os.makedirs(args.out_dir, exist_ok=True)
    out = lambda name: os.path.join(args.out_dir, name)  # noqa: E731
    outputs = []
    if args.format == "json":
        write_json(out("reports.json"), [r.to_json() for r in reports])
        outputs.append(out("reports.json"))
    else:
        write_csv(out("reports.csv"), REPORT_COLUMNS, [row for r in reports for row in report_rows(r)])
        outputs.append(out("reports.csv"))
    cols, rows = ablation_grid(reports)
    write_csv(out("grid.csv"), cols, rows)
    dist_rows, cond_rows = [], []
    for r in reports:
        dcols, d = distribution_table(r)
        ccols, c = conditional_table(r)
        dist_rows += d
        cond_rows += c
    write_csv(out("distribution.csv"), dcols, dist_rows)
    write_csv(out("conditional.csv"), ccols, cond_rows)
    write_csv(out("scatter.csv"), SCATTER_COLUMNS, scatter_points(reports))
    outputs += [out(n) for n in ("grid.csv", "distribution.csv", "conditional.csv", "scatter.csv")]

    config = {"policies": [p.name for p in policies], "format": args.format}
    write_manifest(args.manifest or out("manifest.json"), "eval", config, args.seed,
                   [args.records, args.model, args.policy], outputs)
    width = max(len(r.policy) for r in reports)
    for r in reports:
        print(f"{r.policy:<{width}}  acc {r.accuracy:.4f}  tokens {r.avg_tokens:.1f}")


# --- audit ----------------------------------------------------------------------

def cmd_audit(args) -> None:
    try:
        items = read_audit_items(args.outputs)
    except (KeyError, ValueError) as exc:
        raise UserError(f"{args.outputs}: malformed audit item ({exc})") from None
    rows = audit_corpus(items, args.mode)
    write_csv(args.out, list(TABLE_COLUMNS),
              [dict(zip(TABLE_COLUMNS, r.table_cells())) for r in rows])
    write_manifest(_manifest_path(args, args.out), "audit", {"mode": args.mode}, None,
                   [args.outputs], [args.out])
    print(format_table(rows))


def cmd_gen_audit(args) -> None:
    items, corruption = generate_audit_corpus(args.n_per_path, args.header_rate,
                                              args.nonstrict_rate, args.seed)
    write_audit_items(args.out, items)
    config = {"n_per_path": args.n_per_path, "header_rate": args.header_rate,
              "nonstrict_rate": args.nonstrict_rate,
              "corrupted": {p.value: {"header": len(corruption.header[p]),
                                      "nonstrict": len(corruption.nonstrict[p])} for p in PATHS}}
    write_manifest(_manifest_path(args, args.out), "gen-audit", config, args.seed, [], [args.out])
    print(f"wrote {len(items)} outputs to {args.out}")


# --- losses ---------------------------------------------------------------------

def _load_head(path) -> ProjectionHead:
    obj = _read_json(path)
    try:
        return ProjectionHead(np.asarray(obj["W"], dtype=np.float64), np.asarray(obj["b"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise UserError(f"{path}: invalid projection head ({exc})") from None


def cmd_losses(args) -> None:
    cfg = stage(args.stage)
    head = _load_head(args.head) if args.head else None
    rows = []
    try:
        for rec in read_loss_records(args.tokens):
            rows.append(record_losses(rec, cfg, head))
    except (KeyError, TypeError) as exc:
        raise UserError(f"{args.tokens}: schema violation ({exc})") from None
    write_csv(args.out, ["id", "L_text", "L_vis", "L_latent", "L_exec"], rows)
    write_manifest(_manifest_path(args, args.out), "losses", asdict(cfg), None,
                   [args.tokens, args.head], [args.out])
    print(f"wrote {len(rows)} loss rows to {args.out}")


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pathroute", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(fn=fn)
        p.add_argument("--manifest", help="manifest path (default: beside the main output)")
        return p

    p = add("gen", cmd_gen, "generate a synthetic path-outcome corpus")
    p.add_argument("--preset", help="diversity | homogeneous | domain-shift")
    p.add_argument("--config", help="synth config JSON")
    p.add_argument("--n", type=int, help="records per domain")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--rho", type=float, help="copula correlation in [0, 1]")
    p.add_argument("--block-dim", type=int, default=8, help="feature block width D (presets only)")
    p.add_argument("--split", default="all", choices=["all", "train", "test"],
                   help="keep only domains of this split")
    p.add_argument("--sidecar", default="none", choices=["none", "binary", "jsonl"],
                   help="store features in a sidecar file instead of inline")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train the path planner")
    p.add_argument("--records", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="train config JSON (TrainConfig field names)")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--history", help="history CSV (default: <out>.history.csv)")
    p.add_argument("--out", required=True)

    p = add("calibrate", cmd_calibrate, "fit per-bucket calibration")
    p.add_argument("--records", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--rules", help="bucket rules JSON (default: shipped rules)")
    p.add_argument("--grid", default="default", choices=["default", "trivial"])
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "evaluate routing policies")
    p.add_argument("--records", required=True)
    p.add_argument("--policies", default="fixed,random,model,bucket,calibrated,oracle",
                   help="comma list of " + ", ".join(POLICY_NAMES) + " or path ids")
    p.add_argument("--model")
    p.add_argument("--policy", help="calibration policy JSON")
    p.add_argument("--seed", type=int, default=0, help="seed of the random policy")
    p.add_argument("--format", default="csv", choices=["csv", "json"])
    p.add_argument("--out-dir", required=True)

    p = add("audit", cmd_audit, "audit output format compliance")
    p.add_argument("--outputs", required=True)
    p.add_argument("--mode", default=MULTIPLE_CHOICE, choices=[MULTIPLE_CHOICE, OPEN])
    p.add_argument("--out", required=True)

    p = add("gen-audit", cmd_gen_audit, "generate a seeded output corpus with format defects")
    p.add_argument("--n-per-path", type=int, default=900)
    p.add_argument("--header-rate", type=float, default=0.02)
    p.add_argument("--nonstrict-rate", type=float, default=0.01)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("losses", cmd_losses, "per-trajectory executor losses")
    p.add_argument("--tokens", required=True, help="trajectory token JSONL")
    p.add_argument("--stage", default="S1", help="S1 | S2 | S3 | S4")
    p.add_argument("--head", help="projection head JSON with W and b")
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UserError, ValueError, KeyError) as exc:
        # InvalidConfig, schema errors and friends are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
