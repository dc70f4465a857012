"""Command-line surface: dataset generation, two-stage training, evaluation
sweeps, and mask/prior export.

Configuration values resolve as flag > config file > default; the resolved
values are echoed into every output manifest.  Exit codes: 0 success,
2 usage error, 3 data/model error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

# heavy imports happen inside handlers so --threads can cap BLAS pools first

_THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _bits(text: str):
    if text.strip().lower() in ("inf", "none"):
        return None
    value = int(text)
    if value < 1:
        raise ValueError("bits must be at least 1 (or 'inf')")
    return value


def _snr(text: str):
    if text.strip().lower() == "none":
        return None
    return float(text)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(",") if tok.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def _grid(text: str) -> tuple[float, ...]:
    """Either 'start:stop:step' (inclusive) or a comma list."""
    if ":" in text:
        start, stop, step = (float(tok) for tok in text.split(":"))
        if step <= 0:
            raise ValueError("grid step must be positive")
        values = []
        v = start
        while v <= stop + 1e-9:
            values.append(round(v, 9))
            v += step
        return tuple(values)
    return _floats(text)


# key -> (converter, default); kebab-case flags mirror these names
_KEYS = {
    # scenario
    "n": (int, 16),
    "count": (int, None),
    "kind": (str, "narrowband"),
    "rsu-height": (float, 5.0),
    "lane-offsets": (_floats, (4.0, 7.0)),
    "street-length": (float, 100.0),
    "blockage": (float, 0.27),
    "max-reflections": (int, 1),
    "carrier-freq": (float, 28e9),
    "bandwidth": (float, 100e6),
    "wall-distance": (float, 10.0),
    "reflection-loss-db": (float, 10.0),
    # wideband
    "l-c": (int, 128),
    "l-sub": (int, 8),
    "n-sc": (int, None),
    "pulse": (str, "rc"),
    "rolloff": (float, 0.35),
    # training
    "stage": (int, 1),
    "epochs": (int, 300),
    "batch-size": (int, 128),
    "lr": (float, 1e-3),
    "lr-halve-every": (int, 100),
    "momentum": (float, 0.9),
    "n-c": (int, 10),
    "bits": (_bits, None),
    "snr": (_snr, None),
    "m": (int, 40),
    "fc-hidden": (_ints, (80, 256, 512)),
    "phase-rotation": (_bool, True),
    # evaluation
    "snr-grid": (_grid, _grid("-10:30:5")),
    "m-grid": (_ints, ()),
    "omp-k": (int, 4),
    # global
    "seed": (int, 0),
}


def _read_config_file(path: str) -> dict:
    values = {}
    unknown = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}: expected 'key = value', got {line!r}")
            key, text = (part.strip() for part in line.split("=", 1))
            if key not in _KEYS:
                unknown.append(key)
                continue
            conv, _ = _KEYS[key]
            values[key] = conv(text)
    if unknown:
        raise UsageError(f"{path}: unknown config keys: {', '.join(sorted(unknown))}")
    return values


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, config-file values, and flags (flags win)."""
    file_values = _read_config_file(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key, (conv, default) in _KEYS.items():
        flag_value = getattr(args, key.replace("-", "_"), None)
        if flag_value is not None:
            resolved[key] = conv(flag_value) if isinstance(flag_value, str) else flag_value
        elif key in file_values:
            resolved[key] = file_values[key]
        else:
            resolved[key] = default
    return resolved


def _config_manifest(cfg: dict, keys: list[str]) -> list[tuple[str, str]]:
    entries = []
    for key in keys:
        value = cfg[key]
        if isinstance(value, tuple):
            text = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        entries.append((f"config.{key}", text))
    return entries


_SCENARIO_KEYS = [
    "n", "rsu-height", "lane-offsets", "street-length", "blockage",
    "max-reflections", "carrier-freq", "bandwidth", "wall-distance",
    "reflection-loss-db", "seed",
]
_WIDEBAND_KEYS = ["l-c", "l-sub", "pulse", "rolloff"]
_TRAIN_KEYS = [
    "stage", "epochs", "batch-size", "lr", "lr-halve-every", "momentum",
    "n-c", "bits", "snr", "m", "fc-hidden", "phase-rotation", "seed",
]


def _scenario_config(cfg: dict):
    from .channel import ScenarioConfig

    return ScenarioConfig(
        n=cfg["n"],
        rsu_height=cfg["rsu-height"],
        lane_offsets=cfg["lane-offsets"],
        street_length=cfg["street-length"],
        blockage_prob=cfg["blockage"],
        max_reflections=cfg["max-reflections"],
        carrier_freq=cfg["carrier-freq"],
        bandwidth=cfg["bandwidth"],
        seed=cfg["seed"],
        wall_distance=cfg["wall-distance"],
        reflection_loss_db=cfg["reflection-loss-db"],
    )


def _wideband_config(cfg: dict):
    from .channel import WidebandConfig

    l_c = cfg["l-c"]
    l_sub = l_c // cfg["n-sc"] if cfg["n-sc"] else cfg["l-sub"]
    return WidebandConfig(
        l_c=l_c,
        sample_period=1.0 / cfg["bandwidth"],
        l_sub=l_sub,
        pulse=cfg["pulse"],
        rolloff=cfg["rolloff"],
    )


def cmd_gen(args: argparse.Namespace) -> int:
    import numpy as np

    from . import channel

    cfg = resolve_config(args)
    if not args.out:
        raise UsageError("gen needs --out")
    if cfg["count"] is None or cfg["count"] <= 0:
        raise UsageError("gen needs --count > 0")
    if cfg["kind"] not in ("narrowband", "wideband"):
        raise UsageError(f"unknown dataset kind {cfg['kind']!r}")

    scenario = _scenario_config(cfg)
    manifest = [("command", "gen")]
    keys = _SCENARIO_KEYS + ["count", "kind"]
    if cfg["kind"] == "wideband":
        wcfg = _wideband_config(cfg)
        dataset = channel.gen_wideband_scenario(scenario, wcfg, cfg["count"])
        keys += _WIDEBAND_KEYS
    else:
        dataset = channel.gen_scenario(scenario, cfg["count"])
    manifest += _config_manifest(cfg, keys)
    dataset.save(args.out, extra_manifest=manifest)

    prior = channel.beamspace_prior(dataset)
    support = int(channel.prior_support(prior).sum())
    print(f"samples = {dataset.count}")
    print(f"los_fraction = {float(np.mean(dataset.los)):.4f}")
    print(f"prior_support = {support} / {dataset.n ** 2}")
    print(f"wrote {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from . import channel, network
    from .fileio import sha256_file

    cfg = resolve_config(args)
    if not args.out:
        raise UsageError("train needs --out")
    if not args.data:
        raise UsageError("train needs --data")
    if not os.path.exists(args.data):
        raise DataError(f"dataset not found: {args.data}")

    dataset = channel.Dataset.load(args.data)
    if dataset.n != cfg["n"]:
        raise DataError(f"dataset N={dataset.n} does not match config n={cfg['n']}")

    tc = network.TrainConfig(
        stage=cfg["stage"],
        epochs=cfg["epochs"],
        m=cfg["m"],
        batch_size=cfg["batch-size"],
        lr=cfg["lr"],
        lr_halve_every=cfg["lr-halve-every"],
        momentum=cfg["momentum"],
        quant_interval=cfg["n-c"],
        q=cfg["bits"],
        train_snr_db=cfg["snr"] if cfg["stage"] == 2 else None,
        seed=cfg["seed"],
        fc_hidden=cfg["fc-hidden"],
        phase_rotation=cfg["phase-rotation"],
    )

    def log_epoch(epoch, mean_loss):
        print(f"epoch {epoch + 1}/{tc.epochs} loss {mean_loss:.6f}")

    if cfg["stage"] == 1:
        params = network.train_stage1(channel.normalize_stage1(dataset), tc, on_epoch=log_epoch)
    elif cfg["stage"] == 2:
        if not args.from_model:
            raise UsageError("stage-2 training needs --from <stage1 model>")
        if not os.path.exists(args.from_model):
            raise DataError(f"stage-1 model not found: {args.from_model}")
        stage1 = network.load_model(args.from_model)
        params = network.train_stage2(channel.normalize_eval(dataset), tc, stage1, on_epoch=log_epoch)
    else:
        raise UsageError(f"stage must be 1 or 2, got {cfg['stage']}")

    manifest = [
        ("command", "train"),
        ("dataset", args.data),
        ("dataset_sha256", sha256_file(args.data)),
    ]
    if args.from_model:
        manifest.append(("stage1_model", args.from_model))
        manifest.append(("stage1_sha256", sha256_file(args.from_model)))
    manifest += _config_manifest(cfg, _TRAIN_KEYS)
    network.save_model(params, args.out, extra_manifest=manifest)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from . import baseline, channel, evaluate, network, sensing
    from .fileio import sha256_file

    cfg = resolve_config(args)
    if not args.out:
        raise UsageError("eval needs --out")
    if not args.data:
        raise UsageError("eval needs --data")
    if not os.path.exists(args.data):
        raise DataError(f"dataset not found: {args.data}")
    snr_grid = list(cfg["snr-grid"])
    if not snr_grid:
        raise UsageError("SNR grid is empty")

    dataset = channel.normalize_eval(channel.Dataset.load(args.data))

    methods = []
    metadata = {"dataset": args.data, "dataset_sha256": sha256_file(args.data)}
    learned: dict[str, dict[int, object]] = {}
    for spec in args.model or []:
        if "=" not in spec:
            raise UsageError(f"--model expects NAME=PATH, got {spec!r}")
        name, path = spec.split("=", 1)
        if not os.path.exists(path):
            raise DataError(f"model not found: {path}")
        params = network.load_model(path)
        if params.n != dataset.n or params.n_sc != dataset.n_sc:
            raise DataError(f"model {path} does not match dataset dimensions")
        learned.setdefault(name, {})[params.m] = params
        metadata[f"model.{name}.m{params.m}"] = path
        metadata[f"model_sha256.{name}.m{params.m}"] = sha256_file(path)
    for name, models in learned.items():
        methods.append(evaluate.LearnedMethod(name, models))

    m_grid = list(cfg["m-grid"])
    if not m_grid:
        m_grid = sorted({m for models in learned.values() for m in models})
    if not m_grid:
        raise UsageError("no M grid: pass --m-grid or at least one --model")

    if args.with_omp:
        operators = {
            m: (
                baseline.random_phase_matrix(dataset.n, None, cfg["seed"]),
                sensing.sample_omega(dataset.n, m, cfg["seed"]),
            )
            for m in m_grid
        }
        methods.append(
            evaluate.OmpMethod("omp", operators, baseline.OmpConfig(sparsity=cfg["omp-k"]))
        )
    if args.with_oracle:
        methods.append(evaluate.OracleMethod())
    if not methods:
        raise UsageError("no methods: pass --model, --with-omp, or --with-oracle")

    report = evaluate.sweep(
        dataset, methods, snr_grid, m_grid, cfg["seed"],
        collect_noise_hash=args.debug_noise_hash,
    )
    report.metadata.update(metadata)
    report.metadata["command"] = "eval"
    for key, value in _config_manifest(cfg, ["snr-grid", "m-grid", "omp-k", "seed"]):
        report.metadata[key] = value
    evaluate.write_csv(report, args.out)
    print(f"wrote {args.out} ({len(report.rows)} rows)")

    if args.debug_noise_hash:
        for key in sorted(report.metadata):
            if key.startswith("noise_sha256."):
                print(f"{key} = {report.metadata[key]}")

    if not args.no_figures:
        from . import figures

        base = args.out[:-4] if args.out.endswith(".csv") else args.out
        for path in figures.render_sweep_figures(report, base):
            print(f"wrote {path}")
    return 0


def _write_grid_csv(path: str, matrix, manifest: list[tuple[str, str]]) -> None:
    lines = [f"# {k} = {v}" for k, v in manifest]
    for row in matrix:
        lines.append(",".join(f"{v:.8g}" for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_export_mask(args: argparse.Namespace) -> int:
    from . import network, sensing

    if not args.out:
        raise UsageError("export-mask needs --out")
    if not args.model or not os.path.exists(args.model):
        raise DataError(f"model not found: {args.model}")
    params = network.load_model(args.model)
    grid = sensing.mask(params.base_matrix())
    # no input hash here: masks of equivalent filters must serialize identically
    _write_grid_csv(args.out, grid, [("command", "export-mask"), ("n", str(params.n))])
    print(f"wrote {args.out}")
    if not args.no_figures:
        from . import figures

        base = args.out[:-4] if args.out.endswith(".csv") else args.out
        print(f"wrote {figures.render_heatmap(grid, base + '.png', 'Sensing mask')}")
    return 0


def cmd_prior(args: argparse.Namespace) -> int:
    from . import channel
    from .fileio import sha256_file

    if not args.out:
        raise UsageError("prior needs --out")
    if not args.data or not os.path.exists(args.data):
        raise DataError(f"dataset not found: {args.data}")
    dataset = channel.Dataset.load(args.data)
    prior = channel.beamspace_prior(dataset)
    manifest = [
        ("command", "prior"),
        ("dataset", args.data),
        ("dataset_sha256", sha256_file(args.data)),
        ("n", str(dataset.n)),
        ("count", str(dataset.count)),
    ]
    _write_grid_csv(args.out, prior, manifest)
    print(f"wrote {args.out}")
    if not args.no_figures:
        from . import figures

        base = args.out[:-4] if args.out.endswith(".csv") else args.out
        print(f"wrote {figures.render_heatmap(prior, base + '.png', 'Beamspace prior')}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output path")
    common.add_argument("--threads", type=int, help="cap BLAS thread pools")
    common.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    parser = argparse.ArgumentParser(
        prog="ccsbeam",
        description="Compressive beam alignment: datasets, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_gen = sub.add_parser("gen", parents=[common], help="generate a channel dataset")
    p_gen.add_argument("--count", type=int)
    p_gen.add_argument("--kind", choices=["narrowband", "wideband"])
    for key in ("n", "rsu-height", "street-length", "blockage", "max-reflections",
                "carrier-freq", "bandwidth", "wall-distance", "reflection-loss-db",
                "lane-offsets", "l-c", "l-sub", "n-sc", "pulse", "rolloff"):
        p_gen.add_argument(f"--{key}")
    p_gen.set_defaults(handler=cmd_gen)

    p_train = sub.add_parser("train", parents=[common], help="train a model stage")
    p_train.add_argument("--data", help="dataset file")
    p_train.add_argument("--from", dest="from_model", help="stage-1 model for stage 2")
    for key in ("n", "stage", "epochs", "batch-size", "lr", "lr-halve-every",
                "momentum", "n-c", "bits", "snr", "m", "fc-hidden", "phase-rotation"):
        p_train.add_argument(f"--{key}")
    p_train.set_defaults(handler=cmd_train)

    p_eval = sub.add_parser("eval", parents=[common], help="run an evaluation sweep")
    p_eval.add_argument("--data", help="dataset file")
    p_eval.add_argument("--model", action="append", help="NAME=PATH, repeatable")
    p_eval.add_argument("--with-omp", action="store_true", help="add the OMP baseline")
    p_eval.add_argument("--with-oracle", action="store_true", help="add the oracle row")
    p_eval.add_argument("--debug-noise-hash", action="store_true",
                        help="print per-method noise stream hashes")
    for key in ("snr-grid", "m-grid", "omp-k"):
        p_eval.add_argument(f"--{key}")
    p_eval.set_defaults(handler=cmd_eval)

    p_mask = sub.add_parser("export-mask", parents=[common],
                            help="write the model's sensing mask as CSV")
    p_mask.add_argument("--model", help="model file")
    p_mask.set_defaults(handler=cmd_export_mask)

    p_prior = sub.add_parser("prior", parents=[common],
                             help="write the dataset beamspace prior as CSV")
    p_prior.add_argument("--data", help="dataset file")
    p_prior.set_defaults(handler=cmd_prior)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if "--threads" in argv:
        idx = argv.index("--threads")
        if idx + 1 < len(argv):
            for var in _THREAD_ENV:
                os.environ.setdefault(var, argv[idx + 1])

    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # numerical / data errors from the library
        from .fileio import DataFormatError
        from .sensing import SingularMaskError

        if isinstance(exc, SingularMaskError):
            print(f"numerical error: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        if isinstance(exc, DataFormatError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        from .evaluate import MissingModelError

        if isinstance(exc, MissingModelError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


if __name__ == "__main__":
    sys.exit(main())
