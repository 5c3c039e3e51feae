"""Command line front end.

    vaelab <command> [--config PATH] [--set key=value ...]

Config files are flat ``key = value`` lines; ``#`` starts a comment. Keys not
accepted by the command are rejected. Relative data paths are looked up in the
working directory first, then under ``data_root`` (or ``$VAELAB_DATA_ROOT``).

Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 numerical failure, 5 a post-run check failed.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import cvae as cv
from . import oracle
from . import vae as vf
from .data import (ConditioningSpec, Dataset, IdxCountMismatchError, IdxFormatError,
                   column_condition, load_idx, ring_map)
from .estimators import ConditionalVAE, RegressorBaseline, VariationalAutoencoder
from .nn import CheckpointError, NonFiniteError, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4, 5
DATA_ROOT_ENV = "VAELAB_DATA_ROOT"
RING_MEAN_RADIUS = float(np.sqrt(np.pi / 2) / 10 + 1)


class ConfigError(ValueError):
    pass


class CheckFailed(AssertionError):
    pass


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(kind):
    def parse(s):
        s = str(s).strip()
        return [] if not s else [kind(p) for p in s.split(",")]
    return parse


# name -> (parser, default, positive-required)
SCHEMA = {
    "seed": (int, 0, False),
    "output_dir": (str, "out", False),
    "data_root": (str, "", False),
    "train_images": (str, "train-images-idx3-ubyte", False),
    "test_images": (str, "t10k-images-idx3-ubyte", False),
    "train_subset": (int, 0, False),
    "test_subset": (int, 0, False),
    "latent_dim": (int, 20, True),
    "hidden": (_list(int), [400], False),
    "decoder": (str, "bernoulli", False),
    "sigma": (float, 1.0, True),
    "lr": (float, 1e-3, False),
    "batch_size": (int, 128, True),
    "steps": (int, 5000, False),
    "binarize": (_bool, False, False),
    "timing": (_bool, False, False),
    "grid_rows": (int, 8, True),
    "grid_cols": (int, 8, True),
    "column_index": (int, 14, False),
    "binarize_condition": (_bool, True, False),
    "k": (int, 10, True),
    "sheet_rows": (int, 8, True),
    "loss": (str, "bernoulli", False),
    "checkpoint": (str, "", False),
    "n_samples": (int, 100, True),
    "eval_count": (int, 100, False),
    "n_points": (int, 10000, True),
    "train": (_bool, True, False),
    "ring_sigma": (float, 0.1, True),
    "ring_hidden": (_list(int), [128, 128], False),
    "ring_steps": (int, 6000, False),
    "family": (str, "mixture", False),
    "sigmas": (_list(float), [0.5, 0.1, 0.02], False),
    "xs": (_list(float), [-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0], False),
    "grid_points": (int, 8192, True),
}

_COMMON = {"seed", "output_dir", "data_root"}
_MODEL = {"latent_dim", "hidden", "decoder", "sigma", "lr", "batch_size", "steps", "timing"}
COMMAND_KEYS = {
    "train-vae": _COMMON | _MODEL | {"train_images", "train_subset", "binarize",
                                     "grid_rows", "grid_cols"},
    "train-cvae": _COMMON | _MODEL | {"train_images", "train_subset", "test_images",
                                      "test_subset", "column_index", "binarize_condition",
                                      "k", "sheet_rows"},
    "train-regressor": _COMMON | {"hidden", "lr", "batch_size", "steps", "timing", "loss",
                                  "train_images", "train_subset", "test_images", "test_subset",
                                  "column_index", "binarize_condition", "sheet_rows"},
    "eval": _COMMON | {"checkpoint", "test_images", "test_subset", "n_samples", "eval_count"},
    "sample": _COMMON | {"checkpoint", "grid_rows", "grid_cols"},
    "ring-demo": _COMMON | {"n_points", "train", "ring_sigma", "ring_hidden", "ring_steps",
                            "latent_dim", "lr", "batch_size"},
    "appendix-sweep": _COMMON | {"family", "sigmas", "xs", "grid_points"},
}
_RING_DEFAULTS = {"latent_dim": 2, "batch_size": 256}


def parse_config_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(command: str, raw: dict) -> dict:
    """Validate raw string values against the command's keys and fill defaults."""
    allowed = COMMAND_KEYS[command]
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) for {command}: {', '.join(unknown)}")
    cfg = {}
    for key in sorted(allowed):
        parse, default, positive = SCHEMA[key]
        if command == "ring-demo" and key in _RING_DEFAULTS:
            default = _RING_DEFAULTS[key]
        if key in raw:
            try:
                val = parse(raw[key])
            except ValueError as e:
                raise ConfigError(f"{key}: {e}") from None
        else:
            val = default
        if positive and not val > 0:
            raise ConfigError(f"{key} must be positive")
        cfg[key] = val
    for key in ("steps", "ring_steps", "train_subset", "test_subset", "eval_count", "lr"):
        if key in cfg and cfg[key] < 0:
            raise ConfigError(f"{key} must be non-negative")
    if "hidden" in cfg and any(h <= 0 for h in cfg["hidden"]):
        raise ConfigError("hidden widths must be positive")
    if cfg.get("decoder", "bernoulli") not in vf.FAMILIES:
        raise ConfigError(f"decoder must be one of {vf.FAMILIES}")
    if cfg.get("loss", "bernoulli") not in ("bernoulli", "gaussian"):
        raise ConfigError("loss must be bernoulli or gaussian")
    if cfg.get("family", "mixture") not in oracle.FAMILIES:
        raise ConfigError(f"family must be one of {sorted(oracle.FAMILIES)}")
    return cfg


# -- file emission --------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 greyscale, 8-bit, value round(p * 255) for p in [0, 1]."""
    img = np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit P5 image")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def tile(images: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Row-major grid of (rows*cols, h, w) images with 1-pixel black gaps."""
    n, h, w = images.shape
    out = np.zeros((rows * h + rows - 1, cols * w + cols - 1))
    for i in range(min(n, rows * cols)):
        r, c = divmod(i, cols)
        out[r * (h + 1): r * (h + 1) + h, c * (w + 1): c * (w + 1) + w] = images[i]
    return out


class MetricsWriter:
    def __init__(self, path, fields, timing: bool):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(["step"] + fields + ["wall_ms"])
        self._timing = timing
        self._t0 = time.perf_counter()

    def row(self, step, values):
        ms = round((time.perf_counter() - self._t0) * 1000.0, 3) if self._timing else 0
        self._w.writerow([step] + [repr(float(v)) for v in values] + [ms])

    def close(self):
        self._fh.close()


# -- data -------------------------------------------------------------------------

def resolve_path(cfg: dict, name: str) -> Path:
    p = Path(name)
    if p.is_absolute() or p.exists():
        return p
    root = cfg.get("data_root") or os.environ.get(DATA_ROOT_ENV, "")
    return Path(root) / p if root else p


def _load(cfg, key, subset_key) -> Dataset:
    ds = load_idx(resolve_path(cfg, cfg[key]))
    n = cfg.get(subset_key, 0)
    return ds.subset(n) if n else ds


def _out(cfg) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- checkpoints ------------------------------------------------------------------

def save_model(path, kind: str, model, adam, extra: dict) -> None:
    if kind == "regressor":
        save_checkpoint(path, {"net": model.net}, {"kind": kind, "loss": model.loss, **extra}, adam)
        return
    meta = {"kind": kind, "latent_dim": model.latent_dim, "decoder": model.decoder_family,
            "sigma": repr(float(model.sigma)), "prior_scale": repr(float(model.prior_scale)),
            **extra}
    if kind == "cvae":
        meta["condition_dim"] = model.condition_dim
    save_checkpoint(path, {"encoder": model.encoder, "decoder": model.decoder}, meta, adam)


def load_model(path):
    """Return (kind, model, meta)."""
    nets, meta, _ = load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "regressor":
        return kind, cv.RegressorModel(nets["net"], meta["loss"]), meta
    args = dict(encoder=nets["encoder"], decoder=nets["decoder"],
                latent_dim=int(meta["latent_dim"]), decoder_family=meta["decoder"],
                sigma=float(meta["sigma"]), prior_scale=float(meta["prior_scale"]))
    if kind == "vae":
        return kind, vf.VaeModel(**args), meta
    if kind == "cvae":
        return kind, cv.CvaeModel(condition_dim=int(meta["condition_dim"]), **args), meta
    raise CheckpointError(f"{path}: unknown model kind {kind!r}")


def sample_grid(model: vf.VaeModel, rows: int, cols: int, seed: int, image_hw) -> np.ndarray:
    """Prior samples through the decoder only, tiled into one image."""
    imgs = vf.sample(model, rows * cols, np.random.default_rng(seed))
    return tile(imgs.reshape(-1, *image_hw), rows, cols)


# -- commands ---------------------------------------------------------------------

def cmd_train_vae(cfg: dict) -> int:
    train = _load(cfg, "train_images", "train_subset")
    out = _out(cfg)
    est = VariationalAutoencoder(latent_dim=cfg["latent_dim"], hidden_layer_sizes=cfg["hidden"],
                                 decoder=cfg["decoder"], sigma=cfg["sigma"],
                                 learning_rate=cfg["lr"], batch_size=cfg["batch_size"],
                                 n_steps=cfg["steps"], binarize=cfg["binarize"],
                                 random_state=cfg["seed"])
    metrics = MetricsWriter(out / "metrics.csv", ["recon", "kl", "total"], cfg["timing"])
    try:
        est.fit(train.examples, callback=lambda s, t: metrics.row(s, (t.recon, t.kl, t.total)))
    finally:
        metrics.close()
    hw = (train.image_h, train.image_w)
    save_model(out / "checkpoint.txt", "vae", est.model_, est.optimizer_,
               {"image_h": hw[0], "image_w": hw[1]})
    write_pgm(out / "samples.pgm",
              sample_grid(est.model_, cfg["grid_rows"], cfg["grid_cols"], cfg["seed"], hw))
    return EXIT_OK


def _conditioned(cfg, key, subset_key):
    ds = _load(cfg, key, subset_key)
    spec = ConditioningSpec(cfg["column_index"], cfg["binarize_condition"])
    x, y = column_condition(ds, spec)
    return ds, spec, x, y


def _condition_image(col: np.ndarray, h: int, w: int, index: int) -> np.ndarray:
    img = np.zeros((h, w))
    img[:, index] = col
    return img


def cmd_train_cvae(cfg: dict) -> int:
    train, spec, x, y = _conditioned(cfg, "train_images", "train_subset")
    out = _out(cfg)
    est = ConditionalVAE(latent_dim=cfg["latent_dim"], hidden_layer_sizes=cfg["hidden"],
                         decoder=cfg["decoder"], sigma=cfg["sigma"], learning_rate=cfg["lr"],
                         batch_size=cfg["batch_size"], n_steps=cfg["steps"],
                         binarize=spec.binarize, random_state=cfg["seed"])
    metrics = MetricsWriter(out / "metrics.csv", ["recon", "kl", "total"], cfg["timing"])
    try:
        est.fit(x, y, callback=lambda s, t: metrics.row(s, (t.recon, t.kl, t.total)))
    finally:
        metrics.close()
    h, w = train.image_h, train.image_w
    save_model(out / "checkpoint.txt", "cvae", est.model_, est.optimizer_,
               {"image_h": h, "image_w": w, "column_index": spec.column_index,
                "binarize_condition": spec.binarize})
    test, _, tx, ty = _conditioned(cfg, "test_images", "test_subset")
    rows = min(cfg["sheet_rows"], len(test))
    rng = np.random.default_rng(cfg["seed"])
    cond = spec.present(tx[:rows], rng)
    cands = cv.cvae_sample(est.model_, cond, cfg["k"], rng)
    tiles = []
    for i in range(rows):
        tiles.append(_condition_image(cond[i], h, w, spec.column_index))
        tiles.extend(cands[i].reshape(-1, h, w))
        tiles.append(ty[i].reshape(h, w))
    write_pgm(out / "sheet.pgm", tile(np.array(tiles), rows, cfg["k"] + 2))
    return EXIT_OK


def cmd_train_regressor(cfg: dict) -> int:
    train, spec, x, y = _conditioned(cfg, "train_images", "train_subset")
    out = _out(cfg)
    est = RegressorBaseline(hidden_layer_sizes=cfg["hidden"], loss=cfg["loss"],
                            learning_rate=cfg["lr"], batch_size=cfg["batch_size"],
                            n_steps=cfg["steps"], binarize=spec.binarize,
                            random_state=cfg["seed"])
    metrics = MetricsWriter(out / "metrics.csv", ["loss"], cfg["timing"])
    try:
        est.fit(x, y, callback=lambda s, l: metrics.row(s, (l,)))
    finally:
        metrics.close()
    h, w = train.image_h, train.image_w
    save_model(out / "checkpoint.txt", "regressor", est.model_, est.optimizer_,
               {"image_h": h, "image_w": w, "column_index": spec.column_index,
                "binarize_condition": spec.binarize})
    test, _, tx, ty = _conditioned(cfg, "test_images", "test_subset")
    rows = min(cfg["sheet_rows"], len(test))
    cond = spec.present(tx[:rows], np.random.default_rng(cfg["seed"]))
    pred = cv.regressor_predict(est.model_, cond)
    tiles = []
    for i in range(rows):
        tiles += [_condition_image(cond[i], h, w, spec.column_index),
                  pred[i].reshape(h, w), ty[i].reshape(h, w)]
    write_pgm(out / "sheet.pgm", tile(np.array(tiles), rows, 3))
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    if not cfg["checkpoint"]:
        raise ConfigError("eval needs checkpoint")
    kind, model, meta = load_model(cfg["checkpoint"])
    if kind == "regressor":
        raise ConfigError("eval reports ELBO values; regressor checkpoints have none")
    test = _load(cfg, "test_images", "test_subset")
    n = min(cfg["eval_count"], len(test))
    rng = np.random.default_rng(cfg["seed"])
    out = _out(cfg)
    cond = None
    y = test.examples[:n]
    if kind == "cvae":
        spec = ConditioningSpec(int(meta["column_index"]), meta["binarize_condition"] == "True")
        x, _ = column_condition(test.subset(max(n, 1)), spec)
        cond = spec.present(x[:n], rng)
    width = model.encoder.dims[0] - model.cond_dim
    if test.n_features != width:
        raise CheckpointError(f"checkpoint expects {width} pixels, data has {test.n_features}")
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "elbo_nats", "se", "n_samples"])
        if n:
            est, se = vf.elbo_estimate(model, y, cfg["n_samples"], rng, cond=cond)
            for i in range(n):
                w.writerow([i, repr(float(est[i])), repr(float(se[i])), cfg["n_samples"]])
    return EXIT_OK


def cmd_sample(cfg: dict) -> int:
    if not cfg["checkpoint"]:
        raise ConfigError("sample needs checkpoint")
    kind, model, meta = load_model(cfg["checkpoint"])
    if kind != "vae":
        raise ConfigError("sample draws from an unconditional vae checkpoint")
    hw = (int(meta["image_h"]), int(meta["image_w"]))
    write_pgm(_out(cfg) / "samples.pgm",
              sample_grid(model, cfg["grid_rows"], cfg["grid_cols"], cfg["seed"], hw))
    return EXIT_OK


def _write_points(path, z, pts):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["z1", "z2", "x1", "x2", "radius"])
        for zi, p in zip(z, pts):
            w.writerow([repr(float(zi[0])), repr(float(zi[1])), repr(float(p[0])),
                        repr(float(p[1])), repr(float(np.hypot(p[0], p[1])))])


def train_ring_vae(points: np.ndarray, cfg: dict) -> VariationalAutoencoder:
    est = VariationalAutoencoder(latent_dim=cfg["latent_dim"], hidden_layer_sizes=cfg["ring_hidden"],
                                 decoder="gaussian", sigma=cfg["ring_sigma"],
                                 learning_rate=cfg["lr"], batch_size=cfg["batch_size"],
                                 n_steps=cfg["ring_steps"], random_state=cfg["seed"])
    return est.fit(points)


def cmd_ring_demo(cfg: dict) -> int:
    out = _out(cfg)
    rng = np.random.default_rng(cfg["seed"])
    z = rng.standard_normal((cfg["n_points"], 2))
    pts = ring_map(z)
    _write_points(out / "ring_analytic.csv", z, pts)
    radius = np.hypot(pts[:, 0], pts[:, 1])
    if not np.allclose(radius, np.hypot(z[:, 0], z[:, 1]) / 10 + 1, rtol=0, atol=1e-12):
        raise CheckFailed("analytic ring radius identity violated")
    if cfg["train"]:
        est = train_ring_vae(pts, cfg)
        zd = est.model_.prior_scale * rng.standard_normal((cfg["n_points"], est.model_.latent_dim))
        dec = vf.decoder_mean(est.model_, zd)
        zcols = np.zeros((len(zd), 2))
        zcols[:, :min(2, zd.shape[1])] = zd[:, :2]
        _write_points(out / "ring_decoder.csv", zcols, dec)
        mean_r = float(np.hypot(dec[:, 0], dec[:, 1]).mean())
        if abs(mean_r - RING_MEAN_RADIUS) > 0.1 * RING_MEAN_RADIUS:
            raise CheckFailed(f"decoded mean radius {mean_r:.4f} is not within 10% of "
                              f"{RING_MEAN_RADIUS:.4f}")
    return EXIT_OK


def cmd_appendix_sweep(cfg: dict) -> int:
    out = _out(cfg)
    rows = oracle.convergence_sweep(oracle.FAMILIES[cfg["family"]](), cfg["sigmas"], cfg["xs"],
                                    cfg["grid_points"], check=False)
    oracle.write_sweep_csv(out / "sweep.csv", rows)
    if len(cfg["sigmas"]) > 1:
        table = oracle.sweep_table(rows)
        bad = [x for x, kls in table.items() if not kls[-1] < kls[0]]
        if bad:
            raise CheckFailed(f"KL did not decrease with sigma at x={bad}")
    return EXIT_OK


COMMANDS = {
    "train-vae": cmd_train_vae,
    "train-cvae": cmd_train_cvae,
    "train-regressor": cmd_train_regressor,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "ring-demo": cmd_ring_demo,
    "appendix-sweep": cmd_appendix_sweep,
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vaelab", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    return p


def run(command: str, raw: dict) -> int:
    cfg = build_config(command, raw)
    return COMMANDS[command](cfg)


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        raw = {}
        if args.config:
            try:
                raw.update(parse_config_text(Path(args.config).read_text()))
            except OSError as e:
                raise ConfigError(f"cannot read config: {e}") from None
        for item in args.overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            raw[k.strip()] = v.strip()
        return run(args.command, raw)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, IdxFormatError, IdxCountMismatchError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckFailed, oracle.ConvergenceError, oracle.GridCoverageError) as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
