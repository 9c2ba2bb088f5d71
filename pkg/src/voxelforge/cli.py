"""Command-line interface.

Subcommands cover the whole pipeline: dataset generation or import,
single-cloud voxelization, the two training loops, evaluation with text,
CSV and figure output, and a numeric self-check. Every run echoes a small
manifest of its resolved options before doing any work.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 failed
numeric check.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff.gradcheck import finite_diff_check
from .checkpoint import build_model, load_checkpoint, save_checkpoint
from .errors import (
    ConfigError,
    DegenerateBatch,
    DegenerateCloud,
    EmptyCloud,
    EmptyStore,
    InsufficientTriplets,
    InvalidScore,
    IoError,
    MetadataParse,
    MissingCheckpoint,
    MissingFile,
    MissingRowTag,
    PointOutOfBounds,
    ShapeMismatch,
    TypeMismatch,
    WrongHistoryLength,
)
from .evaluation import eval_classifier, eval_simulation, report_render
from .nets import ClassifierConfig, SimulatorConfig
from .report import render_report_figure, render_training_curve
from .synth import (
    DatasetManifest,
    GridStore,
    PLACEHOLDER_TYPES,
    gen_dataset,
    import_real,
    parse_keyvalue,
)
from .train import TrainPlan, make_windows, split_rows, train_classifier, train_simulator
from .voxel import read_cloud_binary, read_cloud_text, voxelize, write_grid

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_CHECK = 3

_CONFIG_ERRORS = (ConfigError, ValueError, ShapeMismatch, WrongHistoryLength)
_DATA_ERRORS = (
    EmptyCloud, PointOutOfBounds, DegenerateCloud, DegenerateBatch,
    MissingRowTag, InsufficientTriplets, EmptyStore, TypeMismatch,
    MissingFile, MetadataParse, MissingCheckpoint, IoError, InvalidScore,
    OSError,
)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with the config exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _build_parser():
    p = _Parser(prog="voxelforge",
                description="Volumetric glue-deposit defect prediction toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, seed=True, types=False, out=False, dataset=False,
               config=True, train=False):
        if seed:
            sp.add_argument("--seed", type=int, default=None,
                            help="RNG seed (default 0)")
        if types:
            sp.add_argument("--types", default=None,
                            help="comma-separated placeholder types (default all)")
        if out:
            sp.add_argument("--out", required=True, help="output path")
        if dataset:
            sp.add_argument("--dataset", required=True, help="grid dataset directory")
        if config:
            sp.add_argument("--config", default=None,
                            help="key=value config file ('#' comments)")
        if train:
            sp.add_argument("--epochs", type=int, default=None,
                            help="training epochs (default 20)")
            sp.add_argument("--batch", type=int, default=None,
                            help="batch size")

    sp = sub.add_parser("gen", help="generate a synthetic labeled grid dataset")
    common(sp, types=True, out=True)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("import", help="import real point-cloud scans into a grid dataset")
    common(sp, out=True)
    sp.add_argument("--dataset", required=True, help="directory of cNN_T_rR.(xyz|vfpc) files")
    sp.set_defaults(func=cmd_import)

    sp = sub.add_parser("voxelize", help="voxelize one point cloud into an occupancy grid")
    common(sp, seed=False)
    sp.add_argument("--dataset", required=True, help="input .xyz or .vfpc point cloud")
    sp.add_argument("--out", required=True, help="output .vfog grid file")
    sp.set_defaults(func=cmd_voxelize)

    sp = sub.add_parser("train-classifier", help="train the 9-class quantity classifier")
    common(sp, types=True, out=True, dataset=True, train=True)
    sp.set_defaults(func=cmd_train_classifier)

    sp = sub.add_parser("train-simulator", help="train the deposit-shape simulator")
    common(sp, types=True, out=True, dataset=True, train=True)
    sp.add_argument("--classifier", required=True, help="frozen classifier checkpoint")
    sp.add_argument("--alpha", type=float, default=None,
                    help="classification-loss weight (default 0.1)")
    sp.set_defaults(func=cmd_train_simulator)

    sp = sub.add_parser("eval", help="evaluate checkpoints; writes text, CSV and figures")
    common(sp, types=True, dataset=True)
    sp.add_argument("--classifier", required=True, help="classifier checkpoint")
    sp.add_argument("--out", required=True, help="report output directory")
    sp.add_argument("simulators", nargs="*",
                    help="simulator checkpoints to evaluate through the classifier")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("check", help="run gradient and adjoint self-checks")
    common(sp)
    sp.set_defaults(func=cmd_check)
    return p


def _load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        return parse_keyvalue(p.read_text(encoding="utf-8"))
    except MetadataParse as exc:
        raise ConfigError(str(exc)) from exc


def _resolve(flag_value, cfg, key, default, cast):
    """Precedence: explicit flag > config file > default."""
    if flag_value is not None:
        return flag_value
    if key in cfg:
        try:
            return cast(cfg[key])
        except ValueError as exc:
            raise ConfigError(f"config key {key}: {exc}") from exc
    return default


def _parse_types(value):
    if value is None:
        return tuple(PLACEHOLDER_TYPES)
    types = tuple(t.strip() for t in value.split(",") if t.strip())
    bad = [t for t in types if t not in PLACEHOLDER_TYPES]
    if bad:
        raise ConfigError(f"unknown placeholder types: {bad}")
    if not types:
        raise ConfigError("--types must name at least one placeholder type")
    return types


def _parse_int_tuple(text, n, key):
    parts = tuple(int(v) for v in str(text).split(","))
    if len(parts) != n:
        raise ConfigError(f"config key {key} needs {n} comma-separated integers")
    return parts


def _echo_manifest(command, options):
    print(f"command={command}")
    for key in sorted(options):
        print(f"{key}={options[key]}")
    print("---", flush=True)


def _manifest_from_config(cfg, seed_default=0):
    kwargs = {}
    for key, cast in (("circuits", int), ("triplets", int),
                      ("augmentation_count", int), ("keep_ratio", float),
                      ("noise_amplitude", float), ("test_row", int)):
        if key in cfg:
            kwargs[key] = cast(cfg[key])
    if "triplets" in kwargs and "circuits" not in kwargs:
        kwargs["circuits"] = 3 * kwargs["triplets"]
    try:
        return DatasetManifest(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_gen(args):
    cfg = _load_config(args.config)
    seed = _resolve(args.seed, cfg, "seed", 0, int)
    types = _parse_types(args.types if args.types is not None else cfg.get("types"))
    manifest = _manifest_from_config(cfg)
    _echo_manifest("gen", {
        "seed": seed, "types": ",".join(types), "out": args.out,
        "circuits": manifest.circuits,
        "augmentation_count": manifest.augmentation_count,
        "keep_ratio": manifest.keep_ratio,
    })
    store = gen_dataset(manifest, seed=seed, types=types)
    store.save(args.out)
    print(f"wrote {len(store)} grids to {args.out}")
    return EXIT_OK


def cmd_import(args):
    cfg = _load_config(args.config)
    seed = _resolve(args.seed, cfg, "seed", 0, int)
    manifest = _manifest_from_config(cfg)
    _echo_manifest("import", {
        "seed": seed, "dataset": args.dataset, "out": args.out,
        "augmentation_count": manifest.augmentation_count,
    })
    store = import_real(args.dataset, manifest, seed=seed)
    store.save(args.out)
    print(f"imported {len(store)} grids to {args.out}")
    return EXIT_OK


def cmd_voxelize(args):
    _echo_manifest("voxelize", {"dataset": args.dataset, "out": args.out})
    path = Path(args.dataset)
    if not path.exists():
        raise MissingFile(f"{path} does not exist")
    cloud = read_cloud_binary(path) if path.suffix == ".vfpc" else read_cloud_text(path)
    from .synth import DEFAULT_GRID_SPEC

    grid = voxelize(cloud, DEFAULT_GRID_SPEC)
    write_grid(grid, args.out)
    print(f"voxelized {len(cloud.points)} points -> {int(grid.cells.sum())} "
          f"occupied cells in {args.out}")
    return EXIT_OK


def _load_store(path, types):
    store = GridStore.load(path)
    if types is not None:
        keep = set(types)
        store = store.subset([i for i, r in enumerate(store.records)
                              if r.placeholder_type in keep])
    if len(store) == 0:
        raise EmptyStore(f"no grids selected from {path}")
    return store


def _single_type(types, cfg_types):
    value = types if types is not None else cfg_types
    resolved = _parse_types(value)
    if len(resolved) != 1:
        raise ConfigError("training needs exactly one placeholder type (--types T)")
    return resolved


def cmd_train_classifier(args):
    cfg = _load_config(args.config)
    seed = _resolve(args.seed, cfg, "seed", 0, int)
    epochs = _resolve(args.epochs, cfg, "epochs", 20, int)
    batch = _resolve(args.batch, cfg, "batch", 64, int)
    types = _single_type(args.types, cfg.get("types"))
    channels = _parse_int_tuple(cfg.get("channels", "16,32,64,128,256"), 5, "channels")
    fc_width = int(cfg.get("fc_width", 128))
    _echo_manifest("train-classifier", {
        "seed": seed, "epochs": epochs, "batch": batch,
        "types": types[0], "dataset": args.dataset, "out": args.out,
        "channels": ",".join(map(str, channels)), "fc_width": fc_width,
    })
    store = _load_store(args.dataset, types)
    train, test = split_rows(store)
    plan = TrainPlan(epochs=epochs, batch_size=batch, seed=seed)
    config = ClassifierConfig(channels=channels, fc_width=fc_width,
                              placeholder_type=types[0])
    model, state, losses = train_classifier(train, plan, config, log_fn=print)
    save_checkpoint(args.out, model, state, seed=seed, epoch=epochs)
    report, _ = eval_classifier(model, test)
    print(f"saved {args.out}; test mean F {report.mean_all:.3f} "
          f"(classes V-IX {report.mean_v_ix:.3f})")
    return EXIT_OK


def cmd_train_simulator(args):
    cfg = _load_config(args.config)
    seed = _resolve(args.seed, cfg, "seed", 0, int)
    epochs = _resolve(args.epochs, cfg, "epochs", 20, int)
    batch = _resolve(args.batch, cfg, "batch", 16, int)
    alpha = _resolve(args.alpha, cfg, "alpha", 0.1, float)
    types = _single_type(args.types, cfg.get("types"))
    per_window = int(cfg.get("per_window", 4000))
    enc = _parse_int_tuple(cfg.get("enc_channels", "32,64,128,256,512"), 5, "enc_channels")
    dec = _parse_int_tuple(cfg.get("dec_channels", "256,128,64,32,16"), 5, "dec_channels")
    _echo_manifest("train-simulator", {
        "seed": seed, "epochs": epochs, "batch": batch, "alpha": alpha,
        "types": types[0], "dataset": args.dataset, "out": args.out,
        "classifier": args.classifier, "per_window": per_window,
        "enc_channels": ",".join(map(str, enc)),
        "dec_channels": ",".join(map(str, dec)),
    })
    ckpt = load_checkpoint(args.classifier)
    if ckpt.kind != "classifier":
        raise ConfigError(f"{args.classifier} is a {ckpt.kind} checkpoint")
    classifier = build_model(ckpt, dtype=np.float32)
    store = _load_store(args.dataset, types)
    train, _ = split_rows(store)
    windows = make_windows(train, per_window, seed)
    plan = TrainPlan(epochs=epochs, batch_size=batch, seed=seed, alpha=alpha)
    config = SimulatorConfig(enc_channels=enc, dec_channels=dec, alpha=alpha,
                             placeholder_type=types[0])
    model, state, losses = train_simulator(train, windows, classifier, plan,
                                           config, log_fn=print)
    save_checkpoint(args.out, model, state, seed=seed, epoch=epochs)
    print(f"saved {args.out}; final epoch loss {losses[-1]:.6f}")
    return EXIT_OK


def _arch_label(alpha, ptype):
    arch = "arch-1" if alpha == 0.0 else "arch-2"
    return f"{arch} {ptype or '?'} (alpha={alpha:g})"


def cmd_eval(args):
    cfg = _load_config(args.config)
    seed = _resolve(args.seed, cfg, "seed", 0, int)
    per_window = int(cfg.get("eval_per_window", 200))
    _echo_manifest("eval", {
        "seed": seed, "dataset": args.dataset, "classifier": args.classifier,
        "out": args.out, "simulators": ",".join(args.simulators) or "(none)",
    })
    ckpt = load_checkpoint(args.classifier)
    if ckpt.kind != "classifier":
        raise ConfigError(f"{args.classifier} is a {ckpt.kind} checkpoint")
    classifier = build_model(ckpt, dtype=np.float32)
    types = _parse_types(args.types if args.types is not None else cfg.get("types")) \
        if (args.types is not None or "types" in cfg) else None
    store = _load_store(args.dataset, types)
    if classifier.config.placeholder_type is not None:
        store = store.filter_type(classifier.config.placeholder_type)
        if len(store) == 0:
            raise EmptyStore(
                f"dataset has no type {classifier.config.placeholder_type} grids")
    _, test = split_rows(store)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    report, _ = eval_classifier(classifier, test,
                                label=f"classifier {classifier.config.placeholder_type or 'all'}")
    reports.append(report)
    for i, sim_path in enumerate(args.simulators):
        sck = load_checkpoint(sim_path)
        if sck.kind != "simulator":
            raise ConfigError(f"{sim_path} is a {sck.kind} checkpoint")
        simulator = build_model(sck, dtype=np.float32)
        windows = make_windows(test, per_window, seed)
        srep, _ = eval_simulation(simulator, classifier, test, windows,
                                  label=_arch_label(sck.config.get("alpha", 0.0),
                                                    sck.placeholder_type))
        reports.append(srep)
    text, csv = report_render(reports)
    (out_dir / "report.txt").write_text(text, encoding="utf-8")
    (out_dir / "report.csv").write_text(csv, encoding="utf-8")
    figures = []
    for i, r in enumerate(reports):
        fig_path = out_dir / f"report_{i:02d}.png"
        render_report_figure(r, fig_path)
        figures.append(fig_path.name)
    print(text, end="")
    print(f"wrote report.txt, report.csv, {', '.join(figures)} to {out_dir}")
    return EXIT_OK


_CHECK_TOL = 1e-4


def cmd_check(args):
    cfg = _load_config(args.config)
    seed = _resolve(args.seed, cfg, "seed", 0, int)
    _echo_manifest("check", {"seed": seed})
    rng = np.random.default_rng(seed)
    zero2d = lambda t: ad.l2_loss(ad.reshape(t, (t.shape[0], -1)),
                                  np.zeros((t.shape[0], t.data[0].size)))
    x5 = rng.normal(size=(2, 3, 6, 6, 7))
    w5 = rng.normal(size=(4, 3, 3, 3, 3))
    wt = rng.normal(size=(3, 4, 3, 3, 3))
    b5 = rng.normal(size=(4,))
    wd = rng.normal(size=(7, 5))
    bd = rng.normal(size=(5,))
    target = rng.normal(size=(2, 11))
    checks = [
        ("conv3d", lambda: finite_diff_check(
            lambda t: zero2d(ad.conv3d(t, w5, b5, stride=2, padding=1)), x5)),
        ("tconv3d", lambda: finite_diff_check(
            lambda t: zero2d(ad.tconv3d(t, wt, b5, stride=2, padding=1)), x5)),
        ("leaky_relu", lambda: finite_diff_check(
            lambda t: zero2d(ad.leaky_relu(t, 0.01)), rng.normal(size=(2, 40)) + 0.05)),
        ("batchnorm", lambda: finite_diff_check(
            lambda t: zero2d(ad.batchnorm(t, np.ones(3), np.zeros(3),
                                          np.zeros(3), np.ones(3), training=True)),
            rng.normal(size=(4, 3, 2, 2, 2)))),
        ("maxpool3d", lambda: finite_diff_check(
            lambda t: zero2d(ad.maxpool3d(t, 2)), rng.normal(size=(2, 2, 4, 4, 6)))),
        ("dense", lambda: finite_diff_check(
            lambda t: zero2d(ad.dense(t, wd, bd)), rng.normal(size=(3, 7)))),
        ("sigmoid", lambda: finite_diff_check(
            lambda t: zero2d(ad.sigmoid(t)), rng.normal(size=(2, 12)))),
        ("cross_entropy", lambda: finite_diff_check(
            lambda t: ad.cross_entropy(ad.sigmoid(t), np.eye(9)[[2, 5]]),
            rng.normal(size=(2, 9)))),
        ("l2_loss", lambda: finite_diff_check(
            lambda t: ad.l2_loss(t, target), rng.normal(size=(2, 11)))),
    ]
    failed = False
    for name, fn in checks:
        err = fn()
        ok = err < _CHECK_TOL
        failed = failed or not ok
        print(f"{'PASS' if ok else 'FAIL'} gradcheck {name}: max rel err {err:.3e}")
    # adjoint identity over random geometries
    worst = 0.0
    for trial in range(20):
        r = np.random.default_rng((seed, trial))
        k = int(r.integers(1, 4)); s = int(r.integers(1, 3)); p = int(r.integers(0, 2))
        dims = []
        for _ in range(3):
            d = int(r.integers(max(k - 2 * p, 1) + 2, 10))
            while (d + 2 * p - k) % s:
                d += 1
            dims.append(d)
        C = int(r.integers(1, 4)); O = int(r.integers(1, 4))
        x = r.normal(size=(2, C, *dims))
        w = r.normal(size=(O, C, k, k, k))
        y = ad.conv3d(ad.Tensor(x), ad.Tensor(w), stride=s, padding=p).data
        u = r.normal(size=y.shape)
        lhs = float(np.sum(y * u))
        rhs = float(np.sum(x * ad.tconv3d(ad.Tensor(u), ad.Tensor(w),
                                          stride=s, padding=p).data))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1.0))
    ok = worst < 1e-10
    failed = failed or not ok
    print(f"{'PASS' if ok else 'FAIL'} adjoint identity: max rel err {worst:.3e}")
    return EXIT_CHECK if failed else EXIT_OK


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
