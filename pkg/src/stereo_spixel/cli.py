"""Command-line entry point: ``stereo-spixel <subcommand> [options]``.

Every option can also come from a JSON or YAML file passed with ``--config``;
flags on the command line win over the file, which wins over the defaults.
The file may be flat or hold one section per subcommand. Each run writes a
manifest with the resolved configuration and SHA-256 hashes of its outputs.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import torch
import yaml

from . import __version__
from .cluster import ClusterConfig
from .core import (STAGES, FeatureMap, ValidationError, load_pair, read_label, read_rgb,
                   write_feature_dump, write_gray, write_label, write_rgb)
from .dsem import normalize_coords
from .dsfm import apply_attention
from .metrics import benchmark, boundary_map, plot_results, read_results_csv
from .model import (ABLATION_PRESETS, DEFAULT_ETA, beta_scale, lab_tensor, load_checkpoint,
                    network_input, segment_pair)
from .sod import run_sod
from .synth import DatasetLayout, make_synthetic
from .trainer import TrainConfig, train

log = logging.getLogger("stereo_spixel")

DEFAULTS = {
    "synth": {"n": 64, "size": "64x64", "disparity": 8, "seed": 0, "val_fraction": 0.25,
              "centered_object": False},
    "train": {"spixels": 100, "iters": 20000, "ablation": "B0", "seed": 0, "batch_size": 8,
              "crop": "200x200", "channels": 64, "lr": 2e-4, "lambda_stereo": 1.0,
              "eta": DEFAULT_ETA, "n_iters": 5, "checkpoint_every": 1000, "scale_lab": True},
    "segment": {"spixels": [100], "n_iters": 10, "eta": DEFAULT_ETA, "connectivity": False,
                "seed": 0, "split": "val"},
    "eval": {"r": None, "method": "method", "ue_normalize": "segments", "spixels": None,
             "plot": None},
    "plot": {},
    "sod": {"spixels": 100, "n_iters": 10, "eta": DEFAULT_ETA, "seed": 0, "baseline": False,
            "split": "val"},
    "dump-debug": {"spixels": 100, "eta": DEFAULT_ETA, "row": None, "seed": 0},
}

REQUIRED = {
    "synth": ("out",),
    "train": ("data", "out"),
    "segment": ("checkpoint", "out"),
    "eval": ("pred", "gt", "out"),
    "plot": ("inputs", "out"),
    "sod": ("data", "out"),
    "dump-debug": ("checkpoint", "left", "right", "out"),
}


class UsageError(Exception):
    pass


def parse_size(value):
    """``"HxW"``, a single int, or a two-item list to an (H, W) tuple."""
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return int(value[0]), int(value[1])
    if isinstance(value, int):
        return value, value
    text = str(value).lower()
    try:
        parts = [int(p) for p in text.split("x")]
    except ValueError:
        raise UsageError(f"bad size {value!r}; expected HxW") from None
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or min(parts) <= 0:
        raise UsageError(f"bad size {value!r}; expected HxW")
    return tuple(parts)


def build_parser():
    parser = argparse.ArgumentParser(prog="stereo-spixel",
                                     description="Stereo superpixel segmentation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text,
                           argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON or YAML file with option values")
        p.add_argument("--out", help="output directory (file for eval)")
        return p

    p = add("synth", "Generate a synthetic stereo dataset with known disparity.")
    p.add_argument("--n", type=int, help="number of scenes")
    p.add_argument("--size", help="image size HxW")
    p.add_argument("--disparity", type=int, help="maximum disparity in pixels")
    p.add_argument("--seed", type=int)
    p.add_argument("--val-fraction", type=float, dest="val_fraction")
    p.add_argument("--centered-object", action="store_true", dest="centered_object",
                   help="add a salient centred object and write gt/ masks")

    p = add("train", "Train the superpixel network.")
    p.add_argument("--data", help="dataset root with left/, right/, labels/ and train.txt")
    p.add_argument("--spixels", type=int, help="superpixel count used for training")
    p.add_argument("--iters", type=int, help="training iterations")
    p.add_argument("--ablation", choices=sorted(ABLATION_PRESETS), type=str.upper)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--crop", help="crop size HxW")
    p.add_argument("--channels", type=int, help="feature width")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--lambda-stereo", type=float, dest="lambda_stereo")
    p.add_argument("--eta", type=float, help="input scaling coefficient")
    p.add_argument("--n-iters", type=int, dest="n_iters", help="clustering iterations")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--scale-lab", action=argparse.BooleanOptionalAction, dest="scale_lab")

    p = add("segment", "Segment stereo pairs into superpixels.")
    p.add_argument("--checkpoint", help="trained model")
    p.add_argument("--left", help="left image (single-pair mode)")
    p.add_argument("--right", help="right image (single-pair mode)")
    p.add_argument("--data", help="dataset root (batch mode, writes OUT/<n>/<id>.png)")
    p.add_argument("--split", choices=["train", "val"])
    p.add_argument("--spixels", type=int, nargs="+", help="one or more superpixel counts")
    p.add_argument("--n-iters", type=int, dest="n_iters")
    p.add_argument("--eta", type=float)
    p.add_argument("--connectivity", action="store_true", help="merge disconnected fragments")
    p.add_argument("--seed", type=int)

    p = add("eval", "Score predicted superpixels against ground truth.")
    p.add_argument("--pred", help="label PNGs, or numeric subdirectories per count")
    p.add_argument("--gt", help="ground-truth label PNGs")
    p.add_argument("--r", type=int, help="boundary tolerance in pixels")
    p.add_argument("--method", help="method name written to the CSV")
    p.add_argument("--spixels", type=int, help="count reported for a flat prediction dir")
    p.add_argument("--ue-normalize", choices=["segments", "pixels"], dest="ue_normalize")
    p.add_argument("--plot", help="also write metric plots to this directory")

    p = add("plot", "Plot ASA/UE/BR against superpixel count.")
    p.add_argument("--in", nargs="+", dest="inputs", help="results CSV files")

    p = add("sod", "Salient object detection on superpixels.")
    p.add_argument("--checkpoint", help="trained model")
    p.add_argument("--data", help="root with left/, right/, gt/")
    p.add_argument("--split", choices=["train", "val"])
    p.add_argument("--spixels", type=int)
    p.add_argument("--n-iters", type=int, dest="n_iters")
    p.add_argument("--eta", type=float)
    p.add_argument("--baseline", action="store_true",
                   help="use one superpixel per image instead of a model")
    p.add_argument("--seed", type=int)

    p = add("dump-debug", "Dump intermediate features, attention maps and masks.")
    p.add_argument("--checkpoint")
    p.add_argument("--left")
    p.add_argument("--right")
    p.add_argument("--spixels", type=int, help="sets the input scaling")
    p.add_argument("--eta", type=float)
    p.add_argument("--row", type=int, help="image row whose attention maps are written")
    p.add_argument("--seed", type=int)
    return parser


def load_config_file(path, command):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from None
    data = data or {}
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a mapping")
    if isinstance(data.get(command), dict):
        data = data[command]
    data = {k.replace("-", "_"): v for k, v in data.items()
            if not (k in DEFAULTS and isinstance(v, dict))}
    allowed = set(DEFAULTS[command]) | set(REQUIRED[command]) | {"left", "right", "data",
                                                                "checkpoint"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    return data


def resolve(command, args):
    cli = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config")}
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config, command))
    cfg.update(cli)
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s) "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, cfg, artifacts, base):
    base = Path(base)
    entries = {}
    for a in sorted(set(map(Path, artifacts))):
        key = str(a.relative_to(base)) if a.is_relative_to(base) else str(a)
        entries[key] = sha256(a)
    manifest = {"command": command, "version": __version__, "seed": cfg.get("seed"),
                "config": cfg, "artifacts": entries}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n",
                          encoding="utf-8")
    return path


def overlay(rgb, labels, color=(1.0, 0.0, 0.0)):
    out = np.array(rgb, dtype=np.float64, copy=True)
    out[boundary_map(labels)] = color
    return out


def _check_count(n, h, w):
    if n < 1 or n > h * w:
        raise UsageError(f"--spixels {n} must be between 1 and the pixel count {h * w}")


def cmd_synth(cfg):
    h, w = parse_size(cfg["size"])
    layout = make_synthetic(cfg["out"], cfg["n"], h, w, cfg["disparity"], seed=cfg["seed"],
                            val_fraction=cfg["val_fraction"],
                            centered_object=cfg["centered_object"])
    out = Path(cfg["out"])
    files = [p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"]
    write_manifest(out / "manifest.json", "synth", cfg, files, out)
    log.info("wrote %d train / %d val scenes to %s", len(layout.train), len(layout.val), out)


def cmd_train(cfg):
    out = Path(cfg["out"])
    tcfg = TrainConfig(batch_size=cfg["batch_size"], total_iters=cfg["iters"], lr0=cfg["lr"],
                       crop=parse_size(cfg["crop"]), eta=cfg["eta"], n_spixels=cfg["spixels"],
                       n_iters=cfg["n_iters"], channels=cfg["channels"],
                       ablation=cfg["ablation"], lambda_stereo=cfg["lambda_stereo"],
                       scale_lab=cfg["scale_lab"], checkpoint_every=cfg["checkpoint_every"],
                       seed=cfg["seed"])
    train(DatasetLayout.open(cfg["data"]), tcfg, out)
    files = [out / "train_log.csv", out / "final.pt", *sorted(out.glob("ckpt_*.pt"))]
    write_manifest(out / "manifest.json", "train", {**cfg, "train_config": tcfg.to_dict()},
                   files, out)


def cmd_segment(cfg):
    model, _ = load_checkpoint(cfg["checkpoint"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    counts = cfg["spixels"] if isinstance(cfg["spixels"], list) else [cfg["spixels"]]
    written = []
    if cfg.get("left") and cfg.get("right"):
        if len(counts) != 1:
            raise UsageError("single-pair mode takes one --spixels value")
        pair = load_pair(cfg["left"], cfg["right"])
        _check_count(counts[0], *pair.shape)
        seg = segment_pair(model, pair.left, pair.right, counts[0], n_iters=cfg["n_iters"],
                           eta=cfg["eta"], connectivity=cfg["connectivity"],
                           views=("left", "right"))
        for view in ("left", "right"):
            write_label(out / f"{view}_labels.png", seg[view])
            write_rgb(out / f"{view}_overlay.png", overlay(read_rgb(cfg[view]), seg[view]))
            written += [out / f"{view}_labels.png", out / f"{view}_overlay.png"]
    elif cfg.get("data"):
        layout = DatasetLayout.open(cfg["data"])
        pairs = layout.load(cfg["split"])
        for n in counts:
            (out / str(n)).mkdir(exist_ok=True)
            for pair in pairs:
                _check_count(n, *pair.shape)
                seg = segment_pair(model, pair.left, pair.right, n, n_iters=cfg["n_iters"],
                                   eta=cfg["eta"], connectivity=cfg["connectivity"])
                path = out / str(n) / f"{pair.id}.png"
                write_label(path, seg["left"])
                written.append(path)
    else:
        raise UsageError("segment needs --left and --right, or --data")
    write_manifest(out / "manifest.json", "segment", cfg, written, out)


def _prediction_sets(pred_dir, fixed_count):
    pred_dir = Path(pred_dir)
    numeric = sorted((int(p.name), p) for p in pred_dir.iterdir()
                     if p.is_dir() and p.name.isdigit())
    if numeric:
        return numeric
    return [(fixed_count, pred_dir)]


def cmd_eval(cfg):
    gt_dir = Path(cfg["gt"])
    gt_paths = sorted(gt_dir.glob("*.png"))
    if not gt_paths:
        raise ValidationError(f"no ground-truth PNGs in {gt_dir}")
    samples = [SimpleNamespace(id=p.stem, label=read_label(p)) for p in gt_paths]
    sets = _prediction_sets(cfg["pred"], cfg["spixels"])
    dirs = {}
    counts = []
    for n, path in sets:
        if n is None:
            sizes = [len(np.unique(read_label(q))) for q in sorted(path.glob("*.png"))]
            if not sizes:
                raise ValidationError(f"no predictions in {path}")
            n = int(round(float(np.mean(sizes))))
        dirs[n] = path
        counts.append(n)

    def method(sample, n):
        path = dirs[n] / f"{sample.id}.png"
        return read_label(path) if path.exists() else None

    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    benchmark(method, samples, counts, name=cfg["method"], r=cfg["r"], out_csv=out,
              plot_dir=cfg["plot"], ue_normalize=cfg["ue_normalize"])
    files = [out]
    if cfg["plot"]:
        files += sorted(Path(cfg["plot"]).glob("*.png"))
    write_manifest(out.with_name(out.stem + ".manifest.json"), "eval", cfg, files, out.parent)


def cmd_plot(cfg):
    rows = []
    for path in cfg["inputs"]:
        rows += read_results_csv(path)
    if not rows:
        raise ValidationError("no result rows to plot")
    paths = plot_results(rows, cfg["out"])
    write_manifest(Path(cfg["out"]) / "manifest.json", "plot", cfg, paths, cfg["out"])


def cmd_sod(cfg):
    if not cfg["baseline"] and not cfg.get("checkpoint"):
        raise UsageError("sod needs --checkpoint or --baseline")
    root = Path(cfg["data"])
    layout = DatasetLayout.open(root)
    ids = getattr(layout, cfg["split"]) or layout.train + layout.val
    samples = []
    for sid in ids:
        left, right, _ = layout.paths(sid)
        pair = load_pair(left, right, id=sid)
        gt_path = root / "gt" / f"{sid}.png"
        if not gt_path.exists():
            raise ValidationError(f"sample {sid}: missing {gt_path}")
        gt = (read_label(gt_path) > 127).astype(np.float64)
        samples.append(SimpleNamespace(id=sid, left=pair.left, right=pair.right, gt=gt))
    if cfg["baseline"]:
        def segment(sample):
            return np.zeros(sample.left.shape[:2], dtype=np.int64)
    else:
        model, _ = load_checkpoint(cfg["checkpoint"])

        def segment(sample):
            _check_count(cfg["spixels"], *sample.left.shape[:2])
            return segment_pair(model, sample.left, sample.right, cfg["spixels"],
                                n_iters=cfg["n_iters"], eta=cfg["eta"])["left"]
    out = Path(cfg["out"])
    rows = run_sod(segment, samples, out)
    files = [out / "summary.csv"] + [out / f"{sid}.png" for sid, _ in rows]
    write_manifest(out / "manifest.json", "sod", cfg, files, out)
    log.info("mean MAE %.4f over %d images", float(np.mean([e for _, e in rows])), len(rows))


def _unit(x):
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    return np.zeros_like(x) if hi <= lo else (x - lo) / (hi - lo)


def montage(channels, cols=8):
    """Tile C x H x W maps (each rescaled to [0, 1]) into one image."""
    c, h, w = channels.shape
    rows = -(-c // cols)
    canvas = np.zeros((rows * (h + 1) - 1, cols * (w + 1) - 1))
    for k in range(c):
        r, q = divmod(k, cols)
        canvas[r * (h + 1):r * (h + 1) + h, q * (w + 1):q * (w + 1) + w] = _unit(channels[k])
    return canvas


@torch.no_grad()
def cmd_dump_debug(cfg):
    model, _ = load_checkpoint(cfg["checkpoint"])
    pair = load_pair(cfg["left"], cfg["right"])
    h, w = pair.shape
    _check_count(cfg["spixels"], h, w)
    grid = ClusterConfig.from_count(cfg["spixels"], h, w).grid
    beta = beta_scale(grid, h, w, cfg["eta"])
    xy = model.ablation.xy_input
    x_l = network_input(lab_tensor(pair.left), beta, xy)
    x_r = network_input(lab_tensor(pair.right), beta, xy)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def dump(stage, view, tensor):
        path = out / f"{stage}_{view}.bin"
        write_feature_dump(path, FeatureMap(tensor[0].permute(1, 2, 0).numpy(), stage))
        written.append(path)

    def png(name, values):
        write_gray(out / name, values)
        written.append(out / name)

    f_l, f_r = model.extractor(x_l), model.extractor(x_r)
    dump(STAGES[0], "left", f_l)
    dump(STAGES[0], "right", f_r)
    fused = {"left": f_l, "right": f_r}
    if model.dsfm is not None:
        attn = model.dsfm.attention_maps(f_l, f_r)
        mask = model.dsfm.masks(attn)
        dump(STAGES[1], "left", apply_attention(attn.m_r2l, f_r))
        dump(STAGES[1], "right", apply_attention(attn.m_l2r, f_l))
        fused["left"], fused["right"], _, _ = model.dsfm(f_l, f_r)
        dump(STAGES[2], "left", fused["left"])
        dump(STAGES[2], "right", fused["right"])
        row = h // 2 if cfg["row"] is None else cfg["row"]
        if not 0 <= row < h:
            raise UsageError(f"--row must lie in [0, {h})")
        png(f"attention_r2l_row{row}.png", _unit(attn.m_r2l[0, row].numpy()))
        png(f"attention_l2r_row{row}.png", _unit(attn.m_l2r[0, row].numpy()))
        png("mask_l2r.png", mask.o_l2r[0].numpy())
        png("mask_r2l.png", mask.o_r2l[0].numpy())
    grids = normalize_coords(h, w)
    png("x_hat.png", grids.x_hat.numpy())
    png("y_hat.png", grids.y_hat.numpy())
    for view in ("left", "right"):
        emb = model.dsem(fused[view])
        dump(STAGES[3], view, emb)
        if model.dsem.spatial is not None:
            branches = model.dsem.spatial(fused[view])[0].numpy()
            c = fused[view].shape[1]
            png(f"embed_x_{view}.png", montage(branches[:c]))
            png(f"embed_y_{view}.png", montage(branches[c:2 * c]))
    write_manifest(out / "manifest.json", "dump-debug", cfg, written, out)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "segment": cmd_segment, "eval": cmd_eval,
            "plot": cmd_plot, "sod": cmd_sod, "dump-debug": cmd_dump_debug}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help (0) or a usage error (2)
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        torch.manual_seed(int(cfg.get("seed") or 0))
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ValueError, OSError, RuntimeError) as exc:
        print(f"{parser.prog} {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
