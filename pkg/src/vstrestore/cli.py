"""``vstrestore`` command line: phantom, simulate, restore, evaluate, dataset,
train and sweep subcommands.

Every parameter can come from a ``key=value`` file (``--config``) or from
the flag of the same name (``nlm.h`` <-> ``--nlm-h``); flags win. The
resolved parameters are written to ``<out-dir>/<command>.cfg`` so any run
can be repeated with ``--config`` on that file.
"""

from __future__ import annotations

import argparse
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging
import math
from pathlib import Path
import sys

from . import image, metrics, noise, phantom, restore, train
from .config import check_keys, format_config, read_config
from .errors import (ConfigError, ImageFormatError, MetricError, PipelineError,
                     TrainingDivergence)

log = logging.getLogger("vstrestore")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PIPELINE = 4
EXIT_METRIC = 5
EXIT_DIVERGENCE = 6


# --------------------------------------------------------------------------
# parameter tables


@dataclass(frozen=True)
class Param:
    key: str
    kind: str            # int | float | str | bool | list | floats
    default: object = None
    help: str = ""

    @property
    def flag(self):
        return "--" + self.key.replace("_", "-").replace(".", "-")

    @property
    def dest(self):
        return self.key.replace(".", "__")


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _float(text):
    low = str(text).strip().lower()
    return math.inf if low in ("inf", "infinity") else float(low)


def _convert(param: Param, raw):
    if raw is None:
        return None
    try:
        if param.kind == "int":
            return int(raw)
        if param.kind == "float":
            return _float(raw)
        if param.kind == "bool":
            return raw if isinstance(raw, bool) else _bool(raw)
        if param.kind == "list":
            items = raw if isinstance(raw, list) else str(raw).split(",")
            return [s.strip() for s in items if s.strip()]
        if param.kind == "floats":
            items = raw if isinstance(raw, list) else str(raw).split(",")
            return [_float(s) for s in items if str(s).strip()]
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"{param.key}: bad value {raw!r}") from exc


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    if isinstance(value, list):
        return ",".join(_render(v) for v in value)
    return str(value)


MODEL_PARAMS = [
    Param("alpha", "float", 1.0, "quantum gain, DU per quantum"),
    Param("alpha_map", "str", None, "per-pixel gain image (overrides alpha)"),
    Param("sigma_e", "float", 2.0, "electronic noise std, DU"),
    Param("tau", "float", 50.0, "detector offset, DU"),
]

FORMAT_PARAM = Param("format", "str", "rawf32", "output image format: rawf32 or pgm16")

PHANTOM_PARAMS = [
    Param("width", "int", 128), Param("height", "int", 128),
    Param("background_mean", "float", 400.0), Param("blob_count", "int", 12),
    Param("blob_scale", "float", 10.0), Param("blob_amplitude", "float", 0.25),
    Param("spot_count", "int", 3), Param("spot_amplitude", "float", 60.0),
    Param("spot_radius", "float", 1.5), Param("pitch", "float", 0.14),
]

DENOISER_PARAMS = [
    Param("denoiser", "str", "nlm", "identity | gaussian | nlm | kernel | oracle"),
    Param("gaussian.sigma", "float", 1.0), Param("nlm.h", "float", 1.0),
    Param("nlm.patch_radius", "int", 3), Param("nlm.search_radius", "int", 10),
    Param("kernel.file", "str", None, "kernel text file for denoiser=kernel"),
    Param("oracle.truth", "str", None, "noise-free offset-free FD signal for denoiser=oracle"),
]

TRAIN_PARAMS = [
    Param("dataset", "str", None, "directory written by the dataset command"),
    Param("learning_rate", "float", 1e-2), Param("epochs", "int", 300),
    Param("kernel_size", "int", 9), Param("gamma", "float", 0.5),
    Param("unit_dc_gain", "bool", True, "project steps onto kernels summing to one"),
]

COMMANDS = {
    "phantom": PHANTOM_PARAMS + [FORMAT_PARAM],
    "simulate": MODEL_PARAMS + [
        Param("input", "list", None, "noise-free y (direct) or FD realizations (inject)"),
        Param("mode", "str", "direct", "direct | inject"),
        Param("gamma", "float", 1.0), Param("count", "int", 10), FORMAT_PARAM,
    ],
    "restore": MODEL_PARAMS + DENOISER_PARAMS + [
        Param("input", "list", None, "LD realizations"),
        Param("gamma", "float", 0.5), Param("mode", "str", "moment_matching"), FORMAT_PARAM,
    ],
    "evaluate": [
        Param("which", "str", "mnse", "mnse | nps"),
        Param("input", "list", None, "realization stack"),
        Param("truth", "str", None), Param("mask", "str", None),
        Param("truth_offset", "float", 0.0, "DU added to the truth, e.g. tau for an offset-free phantom"),
        Param("adjust", "bool", False, "mean-adjust the stack against the truth first"),
        Param("label", "str", "stack"), Param("gamma", "float", 1.0, "dose tag for the report row"),
        Param("roi_size", "int", 64), Param("overlap", "float", 0.5),
        Param("detrend", "str", "mean"), Param("compensate_window", "bool", True),
        Param("normalize", "bool", True, "divide the NPS by the squared large-area signal"),
    ],
    # phantom keys are namespaced here to keep them apart from the model keys
    "dataset": MODEL_PARAMS + [Param("phantom." + p.key, p.kind, p.default) for p in PHANTOM_PARAMS] + [
        Param("scenes", "int", 6), Param("count", "int", 10, "realizations per dose and scene"),
        Param("gamma", "float", 0.5),
    ],
    "train": MODEL_PARAMS + TRAIN_PARAMS + [Param("lambda_rn", "float", 0.0)],
    "sweep": MODEL_PARAMS + TRAIN_PARAMS + [
        Param("lambdas", "floats", [0.01, 0.34, 0.95]),
        Param("heldout", "str", None, "held-out dataset directory (default: training set)"),
        Param("endpoints", "bool", False, "also train the lambda = 0 and lambda = inf endpoints"),
    ],
}
COMMON = [Param("seed", "int", 0, "root seed for all randomness")]


def _params(command):
    return COMMANDS[command] + COMMON


def resolve(command, file_values, flag_values):
    """Merge defaults, config file and flags; unknown file keys are rejected."""
    params = _params(command)
    check_keys(file_values, [p.key for p in params], command)
    out = {}
    for p in params:
        value = p.default
        if p.key in file_values:
            value = _convert(p, file_values[p.key])
        if flag_values.get(p.key) is not None:
            value = _convert(p, flag_values[p.key])
        out[p.key] = value
    return out


def _echo(values):
    return {k: _render(v) for k, v in values.items() if v is not None}


# --------------------------------------------------------------------------
# helpers


def _out(args, name):
    return Path(args.out_dir) / name


def _ext(fmt):
    if fmt == "rawf32":
        return ".raw"
    if fmt == "pgm16":
        return ".pgm"
    raise ConfigError(f"unknown format {fmt!r}; expected rawf32 or pgm16")


def _model(cfg):
    values = {k: _render(cfg[k]) for k in ("alpha", "sigma_e", "tau", "alpha_map") if cfg.get(k) is not None}
    return noise.AcquisitionModel.from_config(values)


def _require(cfg, key):
    if not cfg.get(key):
        raise ConfigError(f"missing required parameter {key!r}")
    return cfg[key]


def _pmap(jobs, fn, items):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _write_text(path, text):
    try:
        Path(path).write_text(text, newline="\n")
    except OSError as exc:
        raise ImageFormatError(f"cannot write {path}: {exc}") from exc


# --------------------------------------------------------------------------
# commands


def cmd_phantom(cfg, args):
    pc_values = {p.key: _render(cfg[p.key]) for p in PHANTOM_PARAMS}
    pc_values["seed"] = str(cfg["seed"])
    pc = phantom.PhantomConfig.from_config(pc_values)
    y, mask, spots = phantom.generate(pc)
    ext = _ext(cfg["format"])
    image.save_image(y, _out(args, "y" + ext), cfg["format"])
    image.save_mask(mask, _out(args, "mask.pgm"), y.pitch)
    rows = ["row,col"] + [f"{r},{c}" for r, c in spots]
    _write_text(_out(args, "spots.csv"), "\n".join(rows) + "\n")
    return EXIT_OK


def cmd_simulate(cfg, args):
    model = _model(cfg)
    inputs = _require(cfg, "input")
    gamma = noise.dose_value(cfg["gamma"])
    count, seed, fmt = cfg["count"], cfg["seed"], cfg["format"]
    if count < 1:
        raise ConfigError("count must be >= 1")
    planes = [image.load_image(p) for p in inputs]
    if cfg["mode"] == "direct":
        if len(planes) != 1:
            raise ConfigError("direct mode takes exactly one noise-free input")
        make = lambda j: noise.simulate_ld(planes[0], model, gamma, seed + j)
    elif cfg["mode"] == "inject":
        # realization j injects into FD input j mod n
        make = lambda j: noise.inject_ld_from_fd(planes[j % len(planes)], model, gamma, seed + j)
    else:
        raise ConfigError(f"unknown simulate mode {cfg['mode']!r}; expected direct or inject")
    ext = _ext(fmt)
    out = _pmap(args.jobs, make, range(count))
    for j, plane in enumerate(out):
        image.save_image(plane, _out(args, f"real_{j:03d}{ext}"), fmt)
    return EXIT_OK


def _denoiser(cfg, model, gamma, shape):
    name = cfg["denoiser"]
    if name == "identity":
        return restore.make_denoiser("identity")
    if name == "gaussian":
        return restore.make_denoiser("gaussian", sigma=cfg["gaussian.sigma"])
    if name == "nlm":
        return restore.make_denoiser("nlm", h=cfg["nlm.h"], patch_radius=cfg["nlm.patch_radius"],
                                     search_radius=cfg["nlm.search_radius"])
    if name == "kernel":
        kernel = train.ConvKernel.load(_require(cfg, "kernel.file"))
        return restore.make_denoiser("kernel", weights=kernel.weights)
    if name == "oracle":
        y = image.load_image(_require(cfg, "oracle.truth"))
        if y.shape != tuple(shape):
            raise ConfigError("oracle truth does not match the input size")
        return restore.make_denoiser("oracle", truth=gamma * y.data + model.tau, model=model)
    raise ConfigError(f"unknown denoiser {name!r}; expected one of {', '.join(restore.DENOISERS)}")


def cmd_restore(cfg, args):
    model = _model(cfg)
    inputs = _require(cfg, "input")
    gamma = noise.dose_value(cfg["gamma"])
    if cfg["mode"] not in restore.MODES:
        raise ConfigError(f"unknown recombination mode {cfg['mode']!r}")
    planes = [image.load_image(p) for p in inputs]
    denoiser = _denoiser(cfg, model, gamma, planes[0].shape)
    out = _pmap(args.jobs, lambda z: restore.restore_pipeline(z, model, gamma, denoiser, cfg["mode"]),
                planes)
    ext = _ext(cfg["format"])
    for path, plane in zip(inputs, out):
        image.save_image(plane, _out(args, f"restored_{Path(path).stem}{ext}"), cfg["format"])
    return EXIT_OK


def cmd_evaluate(cfg, args):
    inputs = _require(cfg, "input")
    if not cfg.get("mask"):
        raise MetricError("evaluate needs a region mask (--mask)")
    stack = image.load_stack(inputs)
    mask = image.load_mask(cfg["mask"])
    truth = image.load_image(cfg["truth"]) if cfg.get("truth") else None
    if truth is not None and cfg["truth_offset"]:
        truth = truth.like(truth.data + cfg["truth_offset"])
    if cfg["which"] == "mnse":
        if truth is None:
            raise MetricError("mnse needs a truth image (--truth)")
        decompose = metrics.mean_adjust_then_decompose if cfg["adjust"] else metrics.mnse_decompose
        rep = decompose(stack, truth, mask)
        b2, rn, total = rep.percent()
        text = ("label,gamma,bias2_pct,rn_pct,mnse_pct,p,pixels\n"
                f"{cfg['label']},{_render(cfg['gamma'])},{b2:.2f},{rn:.2f},{total:.2f},{rep.p},{rep.pixel_count}\n")
        _write_text(_out(args, "mnse.csv"), text)
    elif cfg["which"] == "nps":
        if cfg["adjust"] and truth is not None:
            stack = metrics.mean_adjust(stack, truth, mask)
        ps = metrics.nps_2d(stack, mask, cfg["roi_size"], cfg["overlap"],
                            cfg["compensate_window"], cfg["detrend"])
        if cfg["normalize"]:
            reference = truth if truth is not None else image.stack_mean(stack)
            ps = metrics.nps_normalize(ps, mask, reference)
        rows = ["freq_cyc_per_mm,nps"] + [f"{float(f)!r},{float(v)!r}" for f, v in ps.radial]
        _write_text(_out(args, "nps_radial.csv"), "\n".join(rows) + "\n")
    else:
        raise ConfigError(f"unknown evaluation {cfg['which']!r}; expected mnse or nps")
    return EXIT_OK


def _scene_dir(root, s):
    return Path(root) / f"scene_{s:03d}"


def cmd_dataset(cfg, args):
    model = _model(cfg)
    pc_values = {p.key: _render(cfg["phantom." + p.key]) for p in PHANTOM_PARAMS}
    pc_values["seed"] = str(cfg["seed"])
    pc = phantom.PhantomConfig.from_config(pc_values)
    if cfg["scenes"] < 1 or cfg["count"] < 2:
        raise ConfigError("dataset needs scenes >= 1 and count >= 2")
    scenes = train.synthetic_dataset(cfg["scenes"], pc, model, cfg["gamma"], cfg["count"], cfg["seed"])
    for s, scene in enumerate(scenes):
        d = _scene_dir(args.out_dir, s)
        d.mkdir(parents=True, exist_ok=True)
        image.save_image(scene.truth, d / "truth.raw", "rawf32")
        image.save_mask(scene.mask, d / "mask.pgm", scene.truth.pitch)
        for j, plane in enumerate(scene.ld.planes):
            image.save_image(plane, d / f"ld_{j:03d}.raw", "rawf32")
        for j, plane in enumerate(scene.fd.planes):
            image.save_image(plane, d / f"fd_{j:03d}.raw", "rawf32")
    return EXIT_OK


def load_dataset(root):
    """Read the scene directories written by ``vstrestore dataset``."""
    root = Path(root)
    dirs = sorted(p for p in root.glob("scene_*") if p.is_dir())
    if not dirs:
        raise ImageFormatError(f"no scene_* directories under {root}")
    scenes = []
    for d in dirs:
        ld = sorted(d.glob("ld_*.raw"))
        fd = sorted(d.glob("fd_*.raw"))
        if len(ld) < 2 or len(fd) < 2:
            raise ImageFormatError(f"{d}: needs at least two ld_* and fd_* realizations")
        scenes.append(train.Scene(image.load_stack(ld), image.load_stack(fd),
                                  image.load_image(d / "truth.raw"), image.load_mask(d / "mask.pgm")))
    return scenes


def _train_config(cfg, lambda_rn=0.0):
    return train.TrainConfig(lambda_rn=lambda_rn, learning_rate=cfg["learning_rate"],
                             epochs=cfg["epochs"], kernel_size=cfg["kernel_size"],
                             gamma=cfg["gamma"], seed=cfg["seed"], unit_dc_gain=cfg["unit_dc_gain"])


def cmd_train(cfg, args):
    model = _model(cfg)
    dataset = load_dataset(_require(cfg, "dataset"))
    kernel, history = train.train_filter(_train_config(cfg, cfg["lambda_rn"]), dataset, model)
    _write_text(_out(args, "kernel.txt"), kernel.to_text())
    _write_text(_out(args, "history.csv"), train.history_csv(history))
    return EXIT_OK


def cmd_sweep(cfg, args):
    model = _model(cfg)
    dataset = load_dataset(_require(cfg, "dataset"))
    heldout = load_dataset(cfg["heldout"]) if cfg.get("heldout") else None
    result = train.lambda_sweep(cfg["lambdas"], _train_config(cfg), dataset, model, heldout,
                                include_endpoints=cfg["endpoints"])
    _write_text(_out(args, "sweep.csv"), result.to_csv())
    if result.rows:
        _write_text(_out(args, "rn_fd.csv"), f"rn_fd\n{float(result.rows[0].rn_fd)!r}\n")
    return EXIT_OK


HANDLERS = {
    "phantom": cmd_phantom, "simulate": cmd_simulate, "restore": cmd_restore,
    "evaluate": cmd_evaluate, "dataset": cmd_dataset, "train": cmd_train, "sweep": cmd_sweep,
}


# --------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="vstrestore", description=__doc__.split("\n\n")[0].replace("\n", " "))
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key=value parameter file")
        sp.add_argument("--out-dir", default=".", help="directory for outputs and the resolved config")
        sp.add_argument("--jobs", type=int, default=1, help="worker threads (results do not depend on it)")
        for p in _params(name):
            nargs = "+" if p.kind == "list" else None
            sp.add_argument(p.flag, dest=p.dest, default=None, nargs=nargs,
                            help=f"{p.help} (default: {_render(p.default)})".strip()
                            if p.default is not None else p.help or None)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = read_config(args.config) if args.config else {}
        flags = {p.key: getattr(args, p.dest) for p in _params(args.command)}
        cfg = resolve(args.command, file_values, flags)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        out_dir = Path(args.out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ImageFormatError(f"cannot create {out_dir}: {exc}") from exc
        # --jobs never changes results, so it is left out of the resolved config
        _write_text(out_dir / f"{args.command}.cfg", format_config(_echo(cfg)))
        return HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        code = EXIT_CONFIG
        err = exc
    except (ImageFormatError, OSError) as exc:
        code = EXIT_IO
        err = exc
    except PipelineError as exc:
        code = EXIT_PIPELINE
        err = exc
    except MetricError as exc:
        code = EXIT_METRIC
        err = exc
    except TrainingDivergence as exc:
        code = EXIT_DIVERGENCE
        err = exc
    print(f"vstrestore {args.command}: error: {err}", file=sys.stderr)
    return code


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
