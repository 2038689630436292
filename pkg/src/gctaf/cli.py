"""Command-line entry point: ``gctaf <command> [options]``.

Commands: synth, train, eval, ablate, sweep, baseline, report.

Every command accepts ``--config PATH`` (a JSON run config), ``--out DIR``,
``--seed N``, ``--threads N`` and repeated ``--set section.key=value``
overrides; flags win over the file. The effective config is written to
``DIR/effective_config.json`` and replaying it with ``--config`` reproduces
the outputs bit for bit.

Exit codes: 0 ok, 1 other failure, 2 usage or configuration, 3 parse or
format, 4 validation, 5 leakage, 6 numeric abort.
"""
import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import metrics
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthSpec, consolidate, impute_fpcknn, load_dataset, write_synthetic, zscore_apply
from .data.synthetic import _with_index
from .errors import (ConfigError, ContractError, DimensionError, FormatError, GctafError,
                     ImputationError, LeakageError, NonFiniteError, NumericAbort, ParseError,
                     ValidationError)
from .model import ABLATION_LABELS, ABLATIONS, ModelConfig
from .pipeline import (evaluate_arrays, mean_tss, prepare_pairs, run_ablation, run_sweep,
                       run_vlt_pairs, train_pairs)
from .training import TrainConfig, VltConfig

log = logging.getLogger("gctaf")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_PARSE, EXIT_VALIDATION, EXIT_LEAKAGE, EXIT_NUMERIC = range(7)

SECTIONS = ("model", "train", "data", "synth", "eval", "ablate", "sweep", "vlt")
SWEEP_COLUMNS = ("head_size", "heads", "ff_dim", "mlp_units", "global_tokens", "dropout",
                 "num_blocks", "learning_rate", "val_tss", "test_tss")

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "model": {},
    "train": {},
    "data": {"partitions": [], "impute_k": 3, "val_fraction": 0.2},
    "synth": {"partitions": 1},
    "eval": {"checkpoints": [], "data": []},
    "ablate": {"seeds": None, "variants": list(ABLATIONS)},
    "sweep": {"grid": {}, "mode": "grid"},
    "vlt": {},
}


def exit_code(exc):
    if isinstance(exc, (NumericAbort, NonFiniteError)):
        return EXIT_NUMERIC
    if isinstance(exc, LeakageError):
        return EXIT_LEAKAGE
    if isinstance(exc, (ParseError, FormatError)):
        return EXIT_PARSE
    if isinstance(exc, (ValidationError, ContractError, DimensionError, ImputationError)):
        return EXIT_VALIDATION
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    return EXIT_OTHER


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _merge(base, update):
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _set(cfg, dotted, value):
    parts = dotted.split(".")
    if parts[0] not in cfg:
        raise ConfigError(f"unknown config key {dotted!r}")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def load_run_config(args):
    """Defaults, then the ``--config`` file, then flag overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", args.config, exc.lineno, exc.colno) from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        unknown = set(loaded) - set(DEFAULTS) - {"command"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        loaded.pop("command", None)
        cfg = _merge(cfg, loaded)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set(cfg, key.strip(), _parse_value(value))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    for flag, section, key in (("epochs", "train", "epochs"), ("lr", "train", "learning_rate"),
                               ("batch_size", "train", "batch_size"), ("ablation", "model", "ablation")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value
    if getattr(args, "data", None):
        cfg["data"]["partitions"] = [str(Path(p).resolve()) for p in args.data]
    cfg["data"]["partitions"] = [str(Path(p).resolve()) for p in cfg["data"]["partitions"]]
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError(f"threads must be a positive integer, got {cfg['threads']!r}")
    return cfg


def model_config(cfg, tau, n_features):
    d = dict(cfg["model"])
    for key, actual in (("tau", tau), ("n_features", n_features)):
        if key in d and d[key] != actual:
            raise ValidationError(f"model.{key}={d[key]} does not match the data ({actual})")
        d[key] = actual
    if "mlp_units" in d:
        d["mlp_units"] = tuple(d["mlp_units"])
    d["seed"] = cfg["seed"]
    return ModelConfig.from_dict(d)


def train_config(cfg):
    return TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def echo_config(out, command, cfg, model_cfg=None, train_cfg=None):
    """Write the fully resolved config; replaying it reproduces the run."""
    eff = copy.deepcopy(cfg)
    eff["command"] = command
    if model_cfg is not None:
        eff["model"] = model_cfg.to_dict()
        eff["model"]["mlp_units"] = list(model_cfg.mlp_units)
    if train_cfg is not None:
        eff["train"] = train_cfg.to_dict()
    write_json(Path(out) / "effective_config.json", eff)
    return eff


def load_partitions(cfg, minimum=2):
    paths = cfg["data"]["partitions"]
    if len(paths) < minimum:
        raise ConfigError(f"need at least {minimum} partition directories, got {len(paths)}")
    parts = []
    for k, path in enumerate(paths):
        ds = load_dataset(path)
        if ds.partition_id is None:
            ds = ds.derive(partition_id=f"P{k + 1}")
        parts.append(ds)
    shapes = {(p.tau, p.n_features) for p in parts if len(p)}
    if len(shapes) > 1:
        raise ValidationError(f"partitions disagree on [tau, N]: {sorted(shapes)}")
    return parts


def prepared_from(cfg, parts):
    d = cfg["data"]
    return prepare_pairs(parts, impute_k=d["impute_k"], val_fraction=d["val_fraction"],
                         undersample_ratio=cfg["train"].get("undersample_ratio"), seed=cfg["seed"])


def _data_shape(parts):
    for p in parts:
        if p.tau is not None:
            return p.tau, p.n_features
    raise ValidationError("all partitions are empty")


def _write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if row[c] is None else row[c] for c in columns])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg, out):
    s = dict(cfg["synth"])
    count = s.pop("partitions", 1)
    for flag, key in (("n", "n_instances"), ("tau", "tau"), ("features", "n_features"),
                      ("imbalance", "imbalance"), ("pattern", "pattern"), ("m", "m"),
                      ("noise", "noise"), ("amplitude", "amplitude"),
                      ("missing", "missing_fraction"), ("signal_features", "signal_features")):
        value = getattr(args, flag)
        if value is not None:
            s[key] = value
    if args.partitions is not None:
        count = args.partitions
    if count < 1:
        raise ConfigError("--partitions must be >= 1")
    spec = SynthSpec.from_dict(s)
    spec.validate()
    cfg["synth"] = {**spec.to_dict(), "partitions": count}
    for k in range(count):
        write_synthetic(_with_index(spec, k), cfg["seed"], out / f"P{k + 1}")
    echo_config(out, "synth", cfg)
    print(f"wrote {count} partition(s) of {spec.n_instances} instances to {out}")


def cmd_train(args, cfg, out):
    parts = load_partitions(cfg)
    mc, tc = model_config(cfg, *_data_shape(parts)), train_config(cfg)
    echo_config(out, "train", cfg, mc, tc)
    prepared = prepared_from(cfg, parts)
    results = train_pairs(mc, tc, prepared, cfg["threads"])
    paths = cfg["data"]["partitions"]
    for k, (p, (params, rep, _)) in enumerate(zip(prepared, results)):
        pair_dir = out / p.name
        pair_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(pair_dir / "checkpoint.gctaf", mc, params,
                        {"zscore.mean": p.mean, "zscore.std": p.std})
        rep.write_csv(pair_dir / "report.csv")
        write_json(pair_dir / "pair.json", {
            "pair": p.name, "train": paths[k], "test": paths[k + 1],
            "selected_epoch": rep.selected_epoch, "impute_k": cfg["data"]["impute_k"]})
        best = rep.best()
        print(f"{p.name}: selected epoch {rep.selected_epoch}, "
              f"val TSS {metrics.format_score(best.val_tss)}")


def evaluate_checkpoint(checkpoint, data_dir, impute_k=3):
    model_cfg, params, extras = load_checkpoint(checkpoint)
    ds = load_dataset(data_dir, split="test")
    if len(ds) == 0:
        raise ContractError(f"test manifest {data_dir} has no instances")
    if (ds.tau, ds.n_features) != (model_cfg.tau, model_cfg.n_features):
        raise ValidationError(f"checkpoint expects [tau, N] = [{model_cfg.tau}, {model_cfg.n_features}], "
                              f"data has [{ds.tau}, {ds.n_features}]")
    if "zscore.mean" not in extras or "zscore.std" not in extras:
        raise FormatError(f"{checkpoint} carries no normalisation statistics")
    mean, std = extras["zscore.mean"], extras["zscore.std"]
    test = consolidate(zscore_apply(impute_fpcknn(ds, impute_k), mean, std), mean, std)
    return evaluate_arrays(params, model_cfg, test.x, test.y)


def _emit_reports(out, named_reports):
    for name, rep in named_reports:
        write_json(out / "metrics" / f"{name}.json", rep)
    if len(named_reports) > 1:
        agg = metrics.aggregate([r for _, r in named_reports])
        agg["pair_names"] = [n for n, _ in named_reports]
        write_json(out / "aggregate.json", agg)
    for name, rep in named_reports:
        print(f"{name}: TSS {metrics.format_score(rep['tss'])}, HSS2 {metrics.format_score(rep['hss2'])}, "
              f"GS {metrics.format_score(rep['gs'])}, accuracy {metrics.format_score(rep['accuracy'])}")


def cmd_eval(args, cfg, out):
    e = cfg["eval"]
    if args.checkpoint:
        e["checkpoints"] = [str(Path(p).resolve()) for p in args.checkpoint]
    if args.test:
        e["data"] = [str(Path(p).resolve()) for p in args.test]
    if args.run:
        run = Path(args.run)
        pairs = sorted(run.glob("*/pair.json"))
        if not pairs:
            raise ConfigError(f"{run} holds no trained pairs")
        e["checkpoints"], e["data"] = [], []
        for pj in pairs:
            info = json.loads(pj.read_text())
            e["checkpoints"].append(str((pj.parent / "checkpoint.gctaf").resolve()))
            e["data"].append(info["test"])
    if not e["checkpoints"] or len(e["checkpoints"]) != len(e["data"]):
        raise ConfigError("eval needs matching --checkpoint and --test lists (or --run)")
    echo_config(out, "eval", cfg)
    named = []
    for ckpt, data in zip(e["checkpoints"], e["data"]):
        name = Path(ckpt).parent.name if Path(ckpt).name == "checkpoint.gctaf" else Path(ckpt).stem
        named.append((name, evaluate_checkpoint(ckpt, data, cfg["data"]["impute_k"])))
    _emit_reports(out, named)


def cmd_baseline(args, cfg, out):
    parts = load_partitions(cfg)
    vc = VltConfig(**{"seed": cfg["seed"], **cfg["vlt"]})
    cfg["vlt"] = {"learning_rate": vc.learning_rate, "epochs": vc.epochs, "seed": vc.seed}
    echo_config(out, "baseline", cfg)
    prepared = prepared_from(cfg, parts)
    _emit_reports(out, [(p.name, r) for p, r in zip(prepared, run_vlt_pairs(prepared, vc))])


def cmd_ablate(args, cfg, out):
    parts = load_partitions(cfg)
    mc, tc = model_config(cfg, *_data_shape(parts)), train_config(cfg)
    a = cfg["ablate"]
    if args.seeds:
        a["seeds"] = list(args.seeds)
    if a["seeds"] is None:
        a["seeds"] = [cfg["seed"]]
    unknown = set(a["variants"]) - set(ABLATIONS)
    if unknown:
        raise ConfigError(f"unknown ablation variants {sorted(unknown)}")
    echo_config(out, "ablate", cfg, mc, tc)
    runs = run_ablation(mc, tc, prepared_from(cfg, parts), a["seeds"], a["variants"], cfg["threads"])
    rows, run_rows = [], []
    for variant in a["variants"]:
        stats = mean_tss(runs[variant])
        rows.append({"variant": variant, "label": ABLATION_LABELS[variant], "mean_tss": stats["mean"],
                     "std_tss": stats["std"], "n_runs": len(runs[variant]),
                     "n_undefined": stats["n_undefined"]})
        for r in runs[variant]:
            run_rows.append({"variant": variant, "seed": r["seed"], "pair": r["pair"],
                             "tss": r["report"]["tss"]})
        agg = metrics.aggregate([r["report"] for r in runs[variant]])
        agg["pair_names"] = [f"{r['pair']}@seed{r['seed']}" for r in runs[variant]]
        write_json(out / "ablate" / f"{variant}.json", agg)
    _write_rows(out / "ablation.csv", ("variant", "label", "mean_tss", "std_tss", "n_runs", "n_undefined"), rows)
    _write_rows(out / "ablation_runs.csv", ("variant", "seed", "pair", "tss"), run_rows)
    for row in rows:
        print(f"{row['label']}: mean TSS {metrics.format_score(row['mean_tss'])}")


def _grid_points(grid):
    points = [{}]
    for key in sorted(grid):
        values = grid[key]
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid entry {key!r} must be a non-empty list")
        points = [{**p, key: v} for p in points for v in values]
    return points


def cmd_sweep(args, cfg, out):
    parts = load_partitions(cfg)
    mc, tc = model_config(cfg, *_data_shape(parts)), train_config(cfg)
    s = cfg["sweep"]
    for item in args.grid or []:
        if "=" not in item:
            raise ConfigError(f"--grid expects key=v1,v2,..., got {item!r}")
        key, values = item.split("=", 1)
        s["grid"][key] = [_parse_value(v) for v in values.split(";" if "[" in values else ",")]
    if args.global_tokens:
        s["mode"] = "global_tokens"
        s["grid"] = {"global_tokens": list(args.global_tokens)}
    known = set(mc.to_dict()) | set(tc.to_dict())
    for key in s["grid"]:
        if key not in known or key in ("seed", "tau", "n_features"):
            raise ConfigError(f"cannot sweep over {key!r}")
    points = _grid_points(s["grid"])
    for p in points:
        if "mlp_units" in p:
            p["mlp_units"] = tuple(p["mlp_units"])
    # validate every point before any training starts
    for p in points:
        mc.replace(**{k: v for k, v in p.items() if k in mc.to_dict()})
        TrainConfig.from_dict({**tc.to_dict(), **{k: v for k, v in p.items() if k in tc.to_dict()}})
    echo_config(out, "sweep", cfg, mc, tc)
    rows = []
    for r in run_sweep(mc, tc, prepared_from(cfg, parts), points, cfg["threads"]):
        m, t = r["model"], r["train"]
        rows.append({"head_size": m.head_size, "heads": m.heads, "ff_dim": m.ff_dim,
                     "mlp_units": "[" + ",".join(str(u) for u in m.mlp_units) + "]",
                     "global_tokens": m.global_tokens, "dropout": m.dropout,
                     "num_blocks": m.num_blocks, "learning_rate": t.learning_rate,
                     "val_tss": r["val_tss"], "test_tss": r["test_tss"]})
    _write_rows(out / "sweep.csv", SWEEP_COLUMNS, rows)
    if s["mode"] == "global_tokens":
        _write_rows(out / "global_tokens.csv", ("global_tokens", "val_tss", "test_tss"), rows)
    for row in rows:
        print(", ".join(f"{c}={row[c]}" for c in SWEEP_COLUMNS))


def cmd_report(args, cfg, out):
    """Mean +- std table from an aggregate JSON."""
    with open(args.aggregate) as fh:
        agg = json.load(fh)
    lines = [f"pairs: {agg['n_pairs']}"]
    for name in metrics.METRIC_NAMES:
        m = agg[name]
        std = "" if m["std"] is None else f" +- {m['std']:.4f}"
        lines.append(f"{name:>8}: {metrics.format_score(m['mean'])}{std}"
                     + (f" ({m['n_undefined']} undefined)" if m["n_undefined"] else ""))
    print("\n".join(lines))


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "sweep": cmd_sweep, "baseline": cmd_baseline, "report": cmd_report}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="gctaf", description="GCTAF flare classifier experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--out", default="gctaf_out", help="output directory")
    common.add_argument("--seed", type=int, help="master seed (non-negative)")
    common.add_argument("--threads", type=int, help="worker processes for independent runs")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. model.heads=2 (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write planted-pattern synthetic partitions")
    p.add_argument("--n", type=int)
    p.add_argument("--tau", type=int)
    p.add_argument("--features", type=int)
    p.add_argument("--imbalance", type=float)
    p.add_argument("--pattern", choices=["dispersed", "contiguous"])
    p.add_argument("--m", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--missing", type=float)
    p.add_argument("--signal-features", type=int)
    p.add_argument("--partitions", type=int)

    def training_flags(p):
        p.add_argument("--data", nargs="+", help="partition directories in time order")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)

    p = sub.add_parser("train", parents=[common], help="train one model per chronological pair")
    training_flags(p)
    p.add_argument("--ablation", choices=ABLATIONS)

    p = sub.add_parser("eval", parents=[common], help="score checkpoints on test partitions")
    p.add_argument("--checkpoint", nargs="+")
    p.add_argument("--test", nargs="+", help="test partition per checkpoint")
    p.add_argument("--run", help="output directory of a train command")

    p = sub.add_parser("ablate", parents=[common], help="compare the ablation variants")
    training_flags(p)
    p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("sweep", parents=[common], help="hyperparameter grid")
    training_flags(p)
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                   help="grid axis; use ';' between values that contain commas")
    p.add_argument("--global-tokens", type=int, nargs="+", help="sweep G only")

    p = sub.add_parser("baseline", parents=[common], help="last-timestamp logistic baseline")
    training_flags(p)

    p = sub.add_parser("report", parents=[common], help="print an aggregate as mean +- std")
    p.add_argument("aggregate", help="aggregate.json written by eval or baseline")
    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("GCTAF_LOG", "error").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args)
        out = Path(args.out)
        if args.command != "report":
            out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
    except GctafError as exc:
        print(f"gctaf {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    except (ValueError, TypeError) as exc:
        # dataclass constructors reject malformed config values this way
        print(f"gctaf {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"gctaf {args.command}: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
