"""Command-line front end: generate, fit, affinities, segment, evaluate, sweep-alpha.

Errors go to stderr as one JSON line, e.g.
``{"error": "config", "message": "unknown key", "file": "run.cfg", "line": 3}``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .affinity import SweepConfig, read_field, sweep, write_field
from .grid import read_image, read_labels, write_image, write_labels
from .model import fit_local_stats, load_model, save_model
from .mws import MwsConfig, segment
from .splitter import SplitConfig
from .synth import GenConfig, generate

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_DATA = 5

SEED_ENV = "IGMSEG_SEED"


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int, **fields):
        super().__init__(message)
        self.code = code
        self.status = status
        self.fields = fields

    def line(self) -> str:
        return json.dumps({"error": self.code, "message": str(self), **self.fields})


# --- config ------------------------------------------------------------------

def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _pair(kind):
    def parse(text):
        vals = tuple(kind(t) for t in text.split(","))
        if len(vals) != 2:
            raise ValueError(f"expected two comma-separated values, got {text!r}")
        return vals
    return parse


SCHEMA = {
    "seed": int,
    "gen.count": int,
    "gen.height": int,
    "gen.width": int,
    "gen.instances": _pair(int),
    "gen.radius": _pair(float),
    "gen.base_mean": float,
    "gen.base_variance": float,
    "gen.field_variance": float,
    "gen.correlation_length": float,
    "gen.noise_variance": float,
    "gen.background_mean": float,
    "gen.background_variance": float,
    "gen.touching_probability": float,
    "gen.n_waves": int,
    "gen.max_retries": int,
    "gen.seed": int,
    "model.bandwidth_grid": _floats,
    "model.n_masks": int,
    "model.seed": int,
    "split.iterations": int,
    "split.d0": float,
    "split.smoothing_sigmas": _floats,
    "split.min_region": int,
    "split.max_depth": int,
    "split.schedule": _bool,
    "split.normalized_smoothing": _bool,
    "split.attempts": int,
    "split.monotone": _bool,
    "sweep.patch_size": int,
    "sweep.stride": int,
    "sweep.seed": int,
    "mws.alpha": float,
    "mws.alpha_grid": _floats,
    "mws.min_segment": int,
}

SEED_KEYS = ("gen.seed", "model.seed", "sweep.seed")


@dataclass
class Config:
    values: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def seed(self, key: str) -> int:
        return self.values.get(key, self.values.get("seed", 0))

    def get(self, key, default=None):
        return self.values.get(key, default)


def parse_config(text: str, source: str = "<config>") -> Config:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise CliError("config", "expected key=value", EXIT_CONFIG, file=source, line=lineno)
        if key not in SCHEMA:
            raise CliError("config", "unknown key", EXIT_CONFIG, file=source, line=lineno, key=key)
        try:
            values[key] = SCHEMA[key](value)
        except ValueError as exc:
            raise CliError("config", str(exc), EXIT_CONFIG, file=source, line=lineno,
                           key=key) from None
    return Config(values)


def load_config(path, env=None) -> Config:
    env = os.environ if env is None else env
    if path is None:
        cfg = Config()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise CliError("input", f"cannot read config: {exc.strerror}", EXIT_INPUT,
                           file=str(path)) from None
        cfg = parse_config(text, str(path))
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise CliError("config", f"{SEED_ENV} must be an integer", EXIT_CONFIG) from None
        cfg.values["seed"] = seed
        for key in SEED_KEYS:
            cfg.values[key] = seed
    return cfg


def gen_config(cfg: Config, index: int = 0) -> GenConfig:
    kw = cfg.section("gen")
    kw.pop("count", None)
    # Image k of a run gets its own seed derived from the run seed.
    base = cfg.seed("gen.seed")
    kw["seed"] = int(np.random.SeedSequence([base, index]).generate_state(1)[0])
    return _build(GenConfig, **kw)


def split_config(cfg: Config) -> SplitConfig:
    return _build(SplitConfig, **cfg.section("split"))


def sweep_config(cfg: Config) -> SweepConfig:
    kw = {k: v for k, v in cfg.section("sweep").items() if k != "seed"}
    return _build(SweepConfig, split=split_config(cfg), seed=cfg.seed("sweep.seed"), **kw)


def _build(cls, **kw):
    try:
        return cls(**kw)
    except ValueError as exc:
        raise CliError("config", str(exc), EXIT_CONFIG) from None


# --- commands ----------------------------------------------------------------

def _stem(path: Path) -> str:
    return path.name.split(".")[0]


def _read(reader, path):
    try:
        return reader(path)
    except FileNotFoundError:
        raise CliError("input", "file not found", EXIT_INPUT, file=str(path)) from None
    except OSError as exc:
        raise CliError("input", exc.strerror or str(exc), EXIT_INPUT, file=str(path)) from None
    except ValueError as exc:
        raise CliError("input", str(exc), EXIT_INPUT, file=str(path)) from None


def _mkdir(path: Path):
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("output", exc.strerror or str(exc), EXIT_INPUT, file=str(path)) from None


def cmd_generate(args, cfg: Config) -> int:
    out = Path(args.out)
    count = args.count if args.count is not None else cfg.get("gen.count", 1)
    dirs = {name: out / name for name in ("images", "labels", "models")}
    for d in dirs.values():
        _mkdir(d)
    for k in range(count):
        gcfg = gen_config(cfg, k)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            sample = generate(gcfg)
        for w in caught:
            print(f"image {k:03d}: {w.message}", file=sys.stderr)
        name = f"{k:03d}"
        write_image(dirs["images"] / f"{name}.pgm", sample.image)
        write_labels(dirs["labels"] / f"{name}.pgm", sample.labels)
        save_model(sample.oracle, dirs["models"] / f"{name}.model")
    print(f"wrote {count} image/label pairs to {out}")
    return 0


def cmd_fit(args, cfg: Config) -> int:
    images = [_read(read_image, Path(p)) for p in args.images]
    kw = {}
    if "model.bandwidth_grid" in cfg.values:
        kw["bandwidth_grid"] = cfg.values["model.bandwidth_grid"]
    if "model.n_masks" in cfg.values:
        kw["n_masks"] = cfg.values["model.n_masks"]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = fit_local_stats(images, seed=cfg.seed("model.seed"), **kw)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    save_model(model, args.out)
    print(f"bandwidth={model.bandwidth:g} residual_variance={model.residual_variance:.6g}")
    return 0


def _model_for(model_arg: Path, image_path: Path):
    path = model_arg / f"{_stem(image_path)}.model" if model_arg.is_dir() else model_arg
    return _read(load_model, path)


def cmd_affinities(args, cfg: Config) -> int:
    scfg = sweep_config(cfg)
    images = [Path(p) for p in args.images]
    out = Path(args.out)
    many = len(images) > 1 or out.is_dir()
    if many:
        _mkdir(out)
    model_arg = Path(args.model)
    for path in images:
        image = _read(read_image, path)
        model = _model_for(model_arg, path)
        if hasattr(model, "shape") and tuple(model.shape) != image.shape:
            raise CliError("data", "model shape does not match image", EXIT_DATA, file=str(path))
        fld = sweep(image, model, scfg, workers=args.workers)
        target = out / f"{_stem(path)}.iaf" if many else out
        write_field(target, fld)
    return 0


def _foreground(path, shape):
    if path is None:
        return None
    fg = _read(read_labels, Path(path)) > 0
    if fg.shape != tuple(shape):
        raise CliError("data", f"foreground shape {fg.shape} does not match field shape "
                       f"{tuple(shape)}", EXIT_DATA, file=str(path))
    return fg


def cmd_segment(args, cfg: Config) -> int:
    fld = _read(read_field, Path(args.field))
    alpha = args.alpha if args.alpha is not None else cfg.get("mws.alpha", 1.0)
    fg = _foreground(args.fg, fld.shape)
    labels = segment(fld, MwsConfig(alpha=alpha, foreground=fg,
                                    min_segment=cfg.get("mws.min_segment", 0)))
    write_labels(args.out, labels)
    print(f"segments={int(labels.max())}")
    return 0


def _pairs(pred_dir: Path, gt_dir: Path, suffix: str):
    gts = sorted(gt_dir.glob("*.pgm"))
    if not gts:
        raise CliError("input", "no ground-truth PGM files", EXIT_INPUT, file=str(gt_dir))
    pairs = []
    for gt in gts:
        pred = pred_dir / f"{_stem(gt)}{suffix}"
        if not pred.exists():
            raise CliError("input", "file not found", EXIT_INPUT, file=str(pred))
        pairs.append((pred, gt))
    return pairs


def evaluate_dirs(pred_dir, gt_dir, thresholds, sparse_gt=False) -> metrics.ReportRow:
    segs, dets = [], []
    for pred_path, gt_path in _pairs(Path(pred_dir), Path(gt_dir), ".pgm"):
        gt = _read(read_labels, gt_path)
        pred = _read(read_labels, pred_path)
        if pred.shape != gt.shape:
            raise CliError("data", "prediction and ground truth differ in shape", EXIT_DATA,
                           file=str(pred_path))
        segs.append(metrics.seg_score(gt, pred, sparse_gt))
        dets.append(metrics.detection_accuracy(gt, pred, thresholds, sparse_gt))
    return metrics.ReportRow(Path(pred_dir).name, None, float(np.mean(segs)),
                             np.mean(dets, axis=0).tolist())


def cmd_evaluate(args, cfg: Config) -> int:
    row = evaluate_dirs(args.pred, args.gt, args.thresholds, args.sparse_gt)
    if args.out:
        metrics.write_csv(args.out, [row], args.thresholds)
    print(metrics.format_table([row], args.thresholds))
    return 0


def sweep_alpha(fields, gts, alphas, thresholds, true_fg=True, min_segment=0):
    """Score every alpha on the given (field, gt) pairs; best = highest SEG, first on ties."""
    rows = []
    for alpha in alphas:
        segs, dets = [], []
        for fld, gt in zip(fields, gts):
            fg = gt > 0 if true_fg else None
            pred = segment(fld, MwsConfig(alpha=alpha, foreground=fg, min_segment=min_segment))
            segs.append(metrics.seg_score(gt, pred))
            dets.append(metrics.detection_accuracy(gt, pred, thresholds))
        rows.append(metrics.ReportRow("inpaint_aff", float(alpha), float(np.mean(segs)),
                                      np.mean(dets, axis=0).tolist()))
    best = max(range(len(rows)), key=lambda k: (rows[k].seg, -k))
    return rows[best].alpha, rows


def cmd_sweep_alpha(args, cfg: Config) -> int:
    alphas = args.alphas if args.alphas is not None else cfg.get("mws.alpha_grid")
    if not alphas:
        raise CliError("usage", "empty alpha grid", EXIT_USAGE)
    fields, gts = [], []
    for fpath, gpath in _pairs(Path(args.fields), Path(args.gt), ".iaf"):
        fld = _read(read_field, fpath)
        gt = _read(read_labels, gpath)
        if gt.shape != tuple(fld.shape):
            raise CliError("data", "field and ground truth differ in shape", EXIT_DATA,
                           file=str(fpath))
        fields.append(fld)
        gts.append(gt)
    best, rows = sweep_alpha(fields, gts, alphas, args.thresholds, args.true_fg,
                             cfg.get("mws.min_segment", 0))
    if args.out:
        metrics.write_csv(args.out, rows, args.thresholds)
    print(metrics.format_table(rows, args.thresholds))
    print(f"best_alpha={best:g}")
    return 0


# --- entry point ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="igmseg", description="Instance segmentation from inpainting information gain.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--workers", type=_positive_int, default=1)
        sp.set_defaults(func=func)
        return sp

    sp = add("generate", cmd_generate, "write synthetic images, labels and oracle models")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=_positive_int)

    sp = add("fit", cmd_fit, "fit a local-statistics inpainting model")
    sp.add_argument("images", nargs="+")
    sp.add_argument("--out", required=True)

    sp = add("affinities", cmd_affinities, "compute averaged affinities (IAF1)")
    sp.add_argument("images", nargs="+")
    sp.add_argument("--model", required=True, help="model file, or directory of <stem>.model")
    sp.add_argument("--out", required=True, help="IAF1 file, or directory for several images")

    sp = add("segment", cmd_segment, "Mutex Watershed on an affinity file")
    sp.add_argument("field")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--fg", help="foreground PGM (non-zero = foreground)")
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "SEG and detection accuracy of a prediction directory")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--thresholds", type=_floats, default=metrics.DEFAULT_THRESHOLDS)
    sp.add_argument("--sparse-gt", action="store_true")
    sp.add_argument("--out")

    sp = add("sweep-alpha", cmd_sweep_alpha, "select alpha on validation fields")
    sp.add_argument("--fields", required=True, help="directory of <stem>.iaf")
    sp.add_argument("--gt", required=True, help="directory of <stem>.pgm label maps")
    sp.add_argument("--alphas", type=_floats)
    sp.add_argument("--thresholds", type=_floats, default=metrics.DEFAULT_THRESHOLDS)
    sp.add_argument("--true-fg", action="store_true", help="restrict to the GT foreground")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except CliError as exc:
        print(exc.line(), file=sys.stderr)
        return exc.status
    except (ValueError, TypeError) as exc:
        print(json.dumps({"error": "data", "message": str(exc)}), file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(json.dumps({"error": "output", "message": exc.strerror or str(exc),
                          "file": exc.filename and str(exc.filename)}), file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
