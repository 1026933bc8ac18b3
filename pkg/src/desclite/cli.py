"""Command-line front end.

Subcommands: synth, describe, fit-pca, train, reduce, eval, sweep, bench.

Exit codes: 1 usage, 2 file-format or dimension errors, 3 numeric errors,
4 configuration errors. Output files are written to a temp file and renamed
into place, so failures leave no partial artifacts. All randomness flows
from --seed; subsystem seeds are derived from it by fixed offsets.

Optional per-command config files are flat `key=value` lines (`#` comments);
explicit flags win over config-file values.
"""
from __future__ import annotations

import argparse
import sys
import time

from . import __version__
from ._binio import write_atomic
from .data import (
    TIER_NAMES,
    extract_descriptors,
    generate_synthetic,
    load_descriptors,
    load_patches,
    save_descriptors,
    save_patches,
)
from .errors import ConfigError, FormatError, NumericError, ShapeError, StateError
from .eval import eval_matching, eval_retrieval, eval_verification
from .nn import load_model, project, save_model
from .pca import fit_pca, load_pca, pca_transform, save_pca
from .train import TrainConfig, reduce as reduce_set, train as train_model

EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_NUMERIC = 3
EXIT_CONFIG = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Manifest:
    """Phase timings plus key=value facts, printed at the end of a command."""

    def __init__(self, command: str, seed):
        self.items = [("tool", f"desclite {__version__}"), ("command", command)]
        if seed is not None:
            self.items.append(("seed", seed))
        self._t0 = time.perf_counter()

    def add(self, key, value):
        self.items.append((key, value))

    def phase(self, name: str):
        return _Phase(self, name)

    def emit(self, path=None):
        self.items.append(("wall_clock_s", f"{time.perf_counter() - self._t0:.3f}"))
        text = "\n".join(f"{k}={v}" for k, v in self.items) + "\n"
        sys.stdout.write(text)
        if path:
            write_atomic(path, text.encode())


class _Phase:
    def __init__(self, manifest: _Manifest, name: str):
        self.manifest = manifest
        self.name = name

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.manifest.add(f"phase.{self.name}_s",
                          f"{time.perf_counter() - self._t0:.3f}")
        return False


def _load_config_file(path: str) -> dict:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for ln, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise FormatError(f"{path}:{ln}: expected key=value, got {raw.strip()!r}")
                key, value = line.split("=", 1)
                values[key.strip()] = value.strip()
    except OSError as exc:
        raise FormatError(f"cannot read config file {path}: {exc}") from exc
    return values


def _merge(args, key: str, file_cfg: dict, default, convert):
    """Flag value if given, else config-file value, else default."""
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    if key in file_cfg:
        raw = file_cfg[key]
        try:
            return convert(raw)
        except ValueError as exc:
            raise ConfigError(f"config key {key}={raw!r}: {exc}") from exc
    return default


def _parse_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_hidden(raw: str):
    raw = raw.strip()
    if not raw or raw == "none":
        return ()
    return tuple(int(tok) for tok in raw.split(","))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    manifest = _Manifest("synth", args.seed)
    tiers = tuple(t.strip() for t in args.tiers.split(","))
    with manifest.phase("generate"):
        dataset = generate_synthetic(args.classes, args.per_class, tiers, seed=args.seed)
    with manifest.phase("write"):
        save_patches(dataset, args.output)
    manifest.add("output", args.output)
    manifest.add("patches", len(dataset))
    manifest.add("classes", args.classes)
    manifest.emit(args.manifest)
    return 0


def _cmd_describe(args) -> int:
    manifest = _Manifest("describe", None)
    with manifest.phase("load"):
        dataset = load_patches(args.input)
    with manifest.phase("describe"):
        dset = extract_descriptors(dataset)
    with manifest.phase("write"):
        save_descriptors(dset, args.output, precision=args.precision)
    manifest.add("input", args.input)
    manifest.add("output", args.output)
    manifest.add("descriptors", len(dset))
    manifest.add("dim", dset.dim)
    manifest.emit(args.manifest)
    return 0


def _cmd_fit_pca(args) -> int:
    manifest = _Manifest("fit-pca", None)
    with manifest.phase("load"):
        dset = load_descriptors(args.input)
    with manifest.phase("fit"):
        model = fit_pca(dset, args.dim)
    with manifest.phase("write"):
        save_pca(model, args.output)
    manifest.add("input", args.input)
    manifest.add("output", args.output)
    manifest.add("input_dim", model.input_dim)
    manifest.add("output_dim", model.output_dim)
    manifest.emit(args.manifest)
    return 0


_TRAIN_KEYS = (
    ("scheme", str, "sv"),
    ("dim", int, 64),
    ("hidden", _parse_hidden, (512, 512)),
    ("epochs", int, None),
    ("batch-size", int, None),
    ("lr", float, 0.001),
    ("lr-schedule", str, None),
    ("margin", float, 1.0),
    ("alpha", float, 0.1),
    ("beta", float, 3.0),
    ("use-distance-loss", _parse_bool, False),
    ("distance-loss-on-positives", _parse_bool, False),
    ("k", int, None),
    ("recluster-period", int, 10),
)


def _train_config(args) -> TrainConfig:
    file_cfg = _load_config_file(args.config) if args.config else {}
    values = {key: _merge(args, key, file_cfg, default, conv)
              for key, conv, default in _TRAIN_KEYS}
    return TrainConfig(
        scheme=values["scheme"],
        target_dim=values["dim"],
        hidden_sizes=values["hidden"],
        epochs=values["epochs"],
        batch_size=values["batch-size"],
        learning_rate=values["lr"],
        lr_schedule=values["lr-schedule"],
        margin=values["margin"],
        alpha=values["alpha"],
        beta=values["beta"],
        use_distance_loss=values["use-distance-loss"],
        distance_loss_on_positives=values["distance-loss-on-positives"],
        k=values["k"],
        recluster_period=values["recluster-period"],
        seed=args.seed,
    )


def _format_log_event(event: dict) -> str:
    keys = [k for k in event if k != "event"]
    return " ".join([f"event={event['event']}"] + [
        f"{k}={_fmt(event[k])}" for k in keys
    ])


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.9g}"
    return value


def _cmd_train(args) -> int:
    manifest = _Manifest("train", args.seed)
    cfg = _train_config(args)
    with manifest.phase("load"):
        dset = load_descriptors(args.input)
    log_lines: list[str] = []
    with manifest.phase("train"):
        encoder = train_model(dset, cfg, log_fn=lambda e: log_lines.append(_format_log_event(e)))
    with manifest.phase("write"):
        save_model(encoder, args.output)
        if args.log:
            write_atomic(args.log, ("\n".join(log_lines) + "\n").encode())
    manifest.add("input", args.input)
    manifest.add("output", args.output)
    if args.log:
        manifest.add("log", args.log)
    for key, _, _ in _TRAIN_KEYS:
        manifest.add(f"config.{key}", getattr(cfg, _CFG_ATTR[key]))
    manifest.emit(args.manifest)
    return 0


_CFG_ATTR = {
    "scheme": "scheme", "dim": "target_dim", "hidden": "hidden_sizes",
    "epochs": "epochs", "batch-size": "batch_size", "lr": "learning_rate",
    "lr-schedule": "lr_schedule", "margin": "margin", "alpha": "alpha",
    "beta": "beta", "use-distance-loss": "use_distance_loss",
    "distance-loss-on-positives": "distance_loss_on_positives", "k": "k",
    "recluster-period": "recluster_period",
}


def _load_projector(path: str):
    """Sniff the model magic: DNN1 -> MLP encoder, DPC1 -> PCA model."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"DNN1":
        model = load_model(path)
        return ("mlp", model, model.input_dim, model.output_dim)
    if magic == b"DPC1":
        model = load_pca(path)
        return ("pca", model, model.input_dim, model.output_dim)
    raise FormatError(f"{path}: unknown model magic {magic!r}")


def _cmd_reduce(args) -> int:
    manifest = _Manifest("reduce", None)
    with manifest.phase("load"):
        dset = load_descriptors(args.input)
        kind, model, in_dim, out_dim = _load_projector(args.model)
    t0 = time.perf_counter()
    with manifest.phase("project"):
        if kind == "mlp":
            reduced = reduce_set(model, dset)
        else:
            reduced = pca_transform(model, dset, normalize=not args.no_normalize)
    elapsed = time.perf_counter() - t0
    with manifest.phase("write"):
        save_descriptors(reduced, args.output, precision=args.precision)
    manifest.add("input", args.input)
    manifest.add("model", args.model)
    manifest.add("output", args.output)
    manifest.add("input_dim", in_dim)
    manifest.add("output_dim", out_dim)
    if len(dset):
        manifest.add("projection_us_per_descriptor",
                     f"{elapsed / len(dset) * 1e6:.3f}")
    manifest.emit(args.manifest)
    return 0


def _cmd_eval(args) -> int:
    manifest = _Manifest("eval", args.seed)
    with manifest.phase("load"):
        dset = load_descriptors(args.input)
    with manifest.phase("evaluate"):
        if args.task == "verification":
            report = eval_verification(dset, pairs_per_tier=args.pairs_per_tier,
                                       seed=args.seed)
        elif args.task == "matching":
            report = eval_matching(dset, seed=args.seed)
        else:
            report = eval_retrieval(dset, distractors_per_query=args.distractors,
                                    seed=args.seed)
    text = "\n".join(report.lines()) + "\n"
    sys.stdout.write(text)
    if args.output:
        write_atomic(args.output, text.encode())
        manifest.add("output", args.output)
    manifest.add("input", args.input)
    manifest.add("task", args.task)
    manifest.add("map_overall", f"{report.map_overall:.6f}")
    manifest.emit(args.manifest)
    return 0


def _cmd_sweep(args) -> int:
    manifest = _Manifest("sweep", args.seed)
    layer_counts = [int(t) for t in args.layers.split(",")]
    sizes = [int(t) for t in args.sizes.split(",")]
    if any(c not in (0, 1, 2) for c in layer_counts):
        raise ConfigError(f"layer counts must be within 0..2, got {layer_counts}")
    with manifest.phase("load"):
        train_set = load_descriptors(args.train_file)
        eval_set = load_descriptors(args.eval_file)
    rows = []
    with manifest.phase("sweep"):
        for layers in layer_counts:
            for size in sizes:
                cfg = TrainConfig(
                    scheme=args.scheme,
                    target_dim=args.dim,
                    hidden_sizes=(size,) * layers,
                    epochs=args.epochs,
                    batch_size=args.batch_size,
                    seed=args.seed,
                )
                encoder = train_model(train_set, cfg)
                reduced = reduce_set(encoder, eval_set)
                report = eval_matching(reduced, seed=args.seed)
                rows.append((layers, size, report.map_overall))
    lines = ["layers size matching_map"]
    lines += [f"{layers} {size} {value:.6f}" for layers, size, value in rows]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.output:
        write_atomic(args.output, text.encode())
        manifest.add("output", args.output)
    manifest.add("cells", len(rows))
    manifest.emit(args.manifest)
    return 0


def _cmd_bench(args) -> int:
    manifest = _Manifest("bench", None)
    with manifest.phase("load"):
        kind, model, in_dim, out_dim = _load_projector(args.model)
        dset = load_descriptors(args.descriptors)
    if dset.dim != in_dim:
        raise ShapeError(
            f"descriptor dim {dset.dim} does not match model input dim {in_dim}"
        )
    if kind != "mlp":
        raise ConfigError("bench times MLP projections; got a PCA model file")
    reps = max(10, args.reps)
    x = dset.descriptors
    times = []
    with manifest.phase("bench"):
        project(model, x[: min(len(x), 2048)])  # warm up buffers/BLAS
        for _ in range(reps):
            t0 = time.perf_counter()
            project(model, x)
            times.append(time.perf_counter() - t0)
    times.sort()
    median = times[len(times) // 2] if reps % 2 else 0.5 * (
        times[reps // 2 - 1] + times[reps // 2])
    per_desc_us = median / len(x) * 1e6
    manifest.add("model", args.model)
    manifest.add("descriptors", args.descriptors)
    manifest.add("count", len(x))
    manifest.add("repetitions", reps)
    manifest.add("median_batch_s", f"{median:.4f}")
    manifest.add("projection_us_per_descriptor", f"{per_desc_us:.3f}")
    manifest.add("memory_ratio", f"{in_dim / out_dim:g}")
    manifest.emit(args.manifest)
    return 0


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="desclite", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic patch dataset (DPT1)")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--tiers", default=",".join(TIER_NAMES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("-m", "--manifest")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("describe", help="extract built-in descriptors (DPT1 -> DDR1)")
    p.add_argument("input")
    p.add_argument("--precision", type=int, choices=(4, 8), default=8)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("-m", "--manifest")
    p.set_defaults(func=_cmd_describe)

    p = sub.add_parser("fit-pca", help="fit the PCA baseline (DDR1 -> DPC1)")
    p.add_argument("input")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("-m", "--manifest")
    p.set_defaults(func=_cmd_fit_pca)

    p = sub.add_parser("train", help="train an encoder (DDR1 -> DNN1)")
    p.add_argument("input")
    p.add_argument("--config", help="key=value config file; flags win")
    p.add_argument("--scheme", choices=("us", "ss", "sv"))
    p.add_argument("--dim", type=int)
    p.add_argument("--hidden", type=_parse_hidden)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-schedule", choices=("none", "linear"))
    p.add_argument("--margin", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--use-distance-loss", action="store_const", const=True)
    p.add_argument("--distance-loss-on-positives", action="store_const", const=True)
    p.add_argument("--k", type=int)
    p.add_argument("--recluster-period", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="write the line-oriented training log here")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("-m", "--manifest")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("reduce", help="project descriptors through a model")
    p.add_argument("input")
    p.add_argument("--model", required=True, help="DNN1 or DPC1 file")
    p.add_argument("--precision", type=int, choices=(4, 8), default=8)
    p.add_argument("--no-normalize", action="store_true",
                   help="skip L2 normalization (PCA models only)")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("-m", "--manifest")
    p.set_defaults(func=_cmd_reduce)

    p = sub.add_parser("eval", help="evaluate a descriptor file on one task")
    p.add_argument("input")
    p.add_argument("--task", choices=("verification", "matching", "retrieval"),
                   required=True)
    p.add_argument("--pairs-per-tier", type=int, default=1000)
    p.add_argument("--distractors", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.add_argument("-m", "--manifest")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="hidden-layer ablation grid (matching mAP)")
    p.add_argument("train_file")
    p.add_argument("eval_file")
    p.add_argument("--scheme", choices=("us", "ss", "sv"), default="sv")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--layers", default="0,1,2")
    p.add_argument("--sizes", default="96,128,256,512,1024")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.add_argument("-m", "--manifest")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("bench", help="time eval-mode projection; report memory ratio")
    p.add_argument("--model", required=True)
    p.add_argument("--descriptors", required=True)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("-m", "--manifest")
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, ShapeError) as exc:
        print(f"desclite: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (NumericError, StateError) as exc:
        print(f"desclite: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"desclite: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"desclite: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
