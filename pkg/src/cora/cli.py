"""Command line interface: ``cora invert | edit | sweep | metrics | replay``.

Exit codes: 0 ok, 1 usage or out-of-range value, 2 I/O problem, 3 record /
schedule / denoiser inconsistency.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .denoiser import DenoiserConfig, ToyDenoiser, embed_prompt
from .metrics import psnr, report
from .pipeline import ConsistencyError, EditConfig, EditError, edit
from .schedule import InversionRecord, NoiseSchedule, invert
from .tensor import (Rng, TensorFormatError, image_to_latent, latent_to_rgb, load_tensor, read_image,
                     save_tensor, to_uint8, write_image)

log = logging.getLogger("cora")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CONSISTENCY = 0, 1, 2, 3
MAX_SWEEP_TILES = 64


class UsageError(Exception):
    pass


class CliIOError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _unit(name):
    def parse(s):
        v = float(s)
        if not 0.0 <= v <= 1.0:
            raise argparse.ArgumentTypeError(f"{name} must lie in [0, 1], got {v}")
        return v
    return parse


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def parse_range(text: str) -> list[float]:
    """``a0:a1:n`` -> n evenly spaced values (a single value is ``a0``)."""
    parts = text.split(":")
    if len(parts) == 1:
        return [float(parts[0])]
    if len(parts) != 3:
        raise UsageError(f"range must look like start:stop:count, got {text!r}")
    a0, a1, n = float(parts[0]), float(parts[1]), int(parts[2])
    if n < 1:
        raise UsageError("range count must be >= 1")
    vals = [a0] if n == 1 else [float(v) for v in np.linspace(a0, a1, n)]
    if any(not 0.0 <= v <= 1.0 for v in vals):
        raise UsageError(f"range {text!r} leaves [0, 1]")
    return vals


def _edit_flags(p):
    p.add_argument("--inversion", required=True, help="directory written by `cora invert`")
    p.add_argument("--target-prompt", default=None, help="edit prompt (default: the inversion prompt)")
    p.add_argument("--gamma", type=_unit("gamma"), default=0.03)
    p.add_argument("--k", type=_positive_int, default=3, help="top-k for bidirectional matching")
    p.add_argument("--strategy", choices=("mutual", "concat", "lerp", "slerp"), default="slerp")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="source scale for concat")
    p.add_argument("--aligned", action=argparse.BooleanOptionalAction, default=True,
                   help="use correspondence-aligned source keys/values on correction steps")
    p.add_argument("--novelty-override", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--hf-keep-radius", type=float, default=0.25)
    p.add_argument("--mask", default=None, help="PNG (white = editable) or latent-shaped .cora")
    p.add_argument("--steps", type=int, default=None, help="assert the record's step count")
    p.add_argument("--weight-seed", type=int, default=None, help="assert the record's weight seed")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cora", description="Correspondence-aware few-step latent editing (toy scale).")
    p.add_argument("--workdir", default=".", help="base directory for every relative path")
    p.add_argument("--version", action="version", version=f"cora {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pi = sub.add_parser("invert", help="invert an image into x_T and correction terms")
    pi.add_argument("--image", required=True)
    pi.add_argument("--prompt", default="")
    pi.add_argument("--steps", type=_positive_int, default=4)
    pi.add_argument("--seed", type=int, default=0, help="forward-noise seed")
    pi.add_argument("--weight-seed", type=int, default=0, help="denoiser weight seed")
    pi.add_argument("--time-shift", type=float, default=0.0)
    pi.add_argument("--c-clip", type=float, default=1.0)
    pi.add_argument("--prior-skip", action=argparse.BooleanOptionalAction, default=True,
                    help="add the analytic Gaussian-prior term to the denoiser output")
    pi.add_argument("--residual-scale", type=float, default=0.1, help="scale of the network residual")
    pi.add_argument("--out", required=True)

    pe = sub.add_parser("edit", help="edit an inverted image")
    _edit_flags(pe)
    pe.add_argument("--alpha", type=_unit("alpha"), default=0.5)
    pe.add_argument("--beta", type=_unit("beta"), default=0.5)
    pe.add_argument("--diagnostics", action="store_true", help="write per-step diagnostics")

    ps = sub.add_parser("sweep", help="grid of edits over alpha (columns) and beta (rows)")
    _edit_flags(ps)
    ps.add_argument("--alpha", default="0:1:3", help="a0:a1:n")
    ps.add_argument("--beta", default="0:1:3", help="b0:b1:m")

    pm = sub.add_parser("metrics", help="MSE / PSNR / SSIM between two images or tensors")
    pm.add_argument("--a", required=True)
    pm.add_argument("--b", required=True)
    pm.add_argument("--mask", default=None, help="subject mask; metrics use the mask==0 background")
    pm.add_argument("--peak", type=float, default=1.0)
    pm.add_argument("--out", default=None, help="report path (default: stdout)")

    pr = sub.add_parser("replay", help="re-run a command from its manifest")
    pr.add_argument("--manifest", required=True)
    pr.add_argument("--out", required=True)
    return p


# -- helpers -----------------------------------------------------------------

def _path(workdir: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else workdir / q


def _read_array(path: Path) -> np.ndarray:
    """Image -> channel-first float in [0, 1]; .cora -> tensor as stored."""
    try:
        if path.suffix == ".cora":
            return load_tensor(path)
        return read_image(path).transpose(2, 0, 1)
    except (OSError, TensorFormatError) as exc:
        raise CliIOError(f"cannot read {path}: {exc}") from exc


def load_mask(path: Path, latent_hw: tuple[int, int]) -> np.ndarray:
    """Binary latent-resolution mask. PNGs are thresholded at 0.5 and a
    latent cell is editable when at least half of its 2x2 pixels are."""
    if path.suffix == ".cora":
        m = _read_array(path)
        m = m.reshape(m.shape[-2:]) if m.ndim == 3 and m.shape[0] == 1 else m
    else:
        img = _read_array(path).mean(axis=0)
        h, w = img.shape
        if (h // 2, w // 2) != tuple(latent_hw) or h % 2 or w % 2:
            raise ConsistencyError(f"mask {h}x{w} does not match the latent {latent_hw}")
        m = (img >= 0.5).astype(np.float64).reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    if m.shape != tuple(latent_hw):
        raise ConsistencyError(f"mask shape {m.shape} does not match the latent {latent_hw}")
    return (m >= 0.5).astype(np.float32)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest(command: str, args: dict, **extra) -> dict:
    m = {"tool": "cora", "version": __version__, "command": command, "args": args}
    m.update(extra)
    return m


def _load_record(workdir: Path, inversion: str) -> InversionRecord:
    path = _path(workdir, inversion)
    try:
        return InversionRecord.load(path)
    except (OSError, KeyError, json.JSONDecodeError, TensorFormatError) as exc:
        raise CliIOError(f"cannot load inversion record {path}: {exc}") from exc


def _edit_config(args: dict, record: InversionRecord, workdir: Path, alpha: float, beta: float) -> EditConfig:
    mask = None
    if args.get("mask"):
        mask = load_mask(_path(workdir, args["mask"]), record.x0.shape[1:])
    try:
        return EditConfig(
            alpha=alpha,
            beta=beta,
            gamma=args["gamma"],
            k_nn=args["k"],
            strategy=args["strategy"],
            lam=args["lam"],
            hf_keep_radius=args["hf_keep_radius"],
            mask=mask,
            tgt_prompt=args.get("target_prompt"),
            novelty_override=args["novelty_override"],
            aligned_mix=args["aligned"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _check_record_flags(args: dict, record: InversionRecord) -> None:
    if args.get("steps") is not None and args["steps"] != record.schedule.T:
        raise ConsistencyError(f"--steps {args['steps']} but the record has {record.schedule.T} steps")
    ws = args.get("weight_seed")
    if ws is not None and ws != record.denoiser.get("weight_seed"):
        raise ConsistencyError(f"--weight-seed {ws} does not match the record")


def _run_edit(args: dict, workdir: Path, out: Path, alpha: float, beta: float, record: InversionRecord,
              denoiser: ToyDenoiser, diagnostics: bool) -> float:
    cfg = _edit_config(args, record, workdir, alpha, beta)
    lat, diag = edit(record, cfg, denoiser)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(lat, out / "latent.cora")
    write_image(to_uint8(latent_to_rgb(lat)), out / "edit.png")
    if cfg.mask is not None:
        save_tensor(cfg.mask, out / "mask.cora")
    if diagnostics:
        diag.write(out / "diagnostics")
    m_args = dict(args, alpha=alpha, beta=beta)
    m_args.pop("out", None)
    _write_json(out / "manifest.json", _manifest(
        "edit", m_args,
        edit_config=cfg.to_dict(),
        denoiser=denoiser.config.to_dict(),
        schedule=record.schedule.to_dict(),
        noise_seed=record.noise_seed,
        source_prompt=record.prompt,
        diagnostics=diagnostics,
    ))
    return psnr(lat, record.x0, peak=2.0)


# -- commands ----------------------------------------------------------------

def cmd_invert(args: dict, workdir: Path, out: Path) -> int:
    img_path = _path(workdir, args["image"])
    try:
        img = read_image(img_path)
    except OSError as exc:
        raise CliIOError(f"cannot read image {img_path}: {exc}") from exc
    if img.shape[0] != img.shape[1]:
        raise UsageError("image must be square")
    try:
        x0 = image_to_latent(img)
        sched = NoiseSchedule.with_steps(args["steps"], time_shift=args["time_shift"], c_clip=args["c_clip"])
        dcfg = DenoiserConfig.for_latent(x0.shape[1], weight_seed=args["weight_seed"],
                                         prior_skip=args.get("prior_skip", True),
                                         residual_scale=args.get("residual_scale", 0.1))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    denoiser = ToyDenoiser(dcfg)
    c = embed_prompt(args["prompt"], denoiser.config.d_model)
    rec = invert(x0, c, sched, denoiser, Rng(args["seed"]), prompt=args["prompt"])
    rec.save(out)
    m_args = dict(args)
    m_args.pop("out", None)
    _write_json(out / "run.json", _manifest("invert", m_args, denoiser=denoiser.config.to_dict(),
                                            schedule=sched.to_dict()))
    print(f"inverted {img_path} -> {out} ({sched.T} steps)", file=sys.stderr)
    return EXIT_OK


def cmd_edit(args: dict, workdir: Path, out: Path) -> int:
    record = _load_record(workdir, args["inversion"])
    _check_record_flags(args, record)
    denoiser = ToyDenoiser(DenoiserConfig(**record.denoiser))
    db = _run_edit(args, workdir, out, args["alpha"], args["beta"], record, denoiser, args.get("diagnostics", False))
    print(f"latent PSNR vs source: {'inf' if np.isinf(db) else f'{db:.2f}'} dB", file=sys.stderr)
    return EXIT_OK


def _label_grid(tiles: list[list[np.ndarray]], alphas, betas) -> np.ndarray:
    from PIL import Image, ImageDraw

    th, tw = tiles[0][0].shape[:2]
    left, top, pad = 56, 20, 2
    H = top + len(betas) * (th + pad)
    W = left + len(alphas) * (tw + pad)
    canvas = Image.new("RGB", (W, H), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    for j, a in enumerate(alphas):
        draw.text((left + j * (tw + pad) + 2, 4), f"a={a:.2f}", fill=(0, 0, 0))
    for i, b in enumerate(betas):
        draw.text((2, top + i * (th + pad) + th // 2 - 5), f"b={b:.2f}", fill=(0, 0, 0))
        for j in range(len(alphas)):
            canvas.paste(Image.fromarray(tiles[i][j]), (left + j * (tw + pad), top + i * (th + pad)))
    return np.asarray(canvas)


def cmd_sweep(args: dict, workdir: Path, out: Path) -> int:
    alphas = parse_range(args["alpha"])
    betas = parse_range(args["beta"])
    if len(alphas) * len(betas) > MAX_SWEEP_TILES:
        raise UsageError(f"sweep of {len(alphas) * len(betas)} tiles exceeds the cap of {MAX_SWEEP_TILES}")
    record = _load_record(workdir, args["inversion"])
    _check_record_flags(args, record)
    denoiser = ToyDenoiser(DenoiserConfig(**record.denoiser))
    _edit_config(args, record, workdir, 0.0, 0.0)  # validate shared flags before fanning out
    base = dict(args)
    base.pop("alpha"), base.pop("beta")

    jobs = [(i, j, b, a) for i, b in enumerate(betas) for j, a in enumerate(alphas)]

    def run(job):
        i, j, b, a = job
        tile_dir = out / "tiles" / f"b{i}_a{j}"
        _run_edit(base, workdir, tile_dir, a, b, record, denoiser, False)
        return i, j

    threads = max(1, int(os.environ.get("CORA_THREADS", "1")))
    if threads == 1:
        for job in jobs:
            run(job)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, jobs))
    tiles = [[read_tile(out / "tiles" / f"b{i}_a{j}" / "edit.png") for j in range(len(alphas))]
             for i in range(len(betas))]
    write_image(_label_grid(tiles, alphas, betas), out / "grid.png")
    m_args = dict(args)
    m_args.pop("out", None)
    _write_json(out / "manifest.json", _manifest("sweep", m_args, alphas=alphas, betas=betas))
    print(f"sweep {len(betas)}x{len(alphas)} -> {out / 'grid.png'}", file=sys.stderr)
    return EXIT_OK


def read_tile(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def cmd_metrics(args: dict, workdir: Path, out: Path | None) -> int:
    a = _read_array(_path(workdir, args["a"]))
    b = _read_array(_path(workdir, args["b"]))
    if a.shape != b.shape:
        raise CliIOError(f"shape mismatch {a.shape} vs {b.shape}")
    mask = None
    if args.get("mask"):
        m = _read_array(_path(workdir, args["mask"]))
        mask = (m.mean(axis=0) >= 0.5).astype(np.float32) if m.ndim == 3 else (m >= 0.5).astype(np.float32)
        if mask.shape != a.shape[-2:]:
            raise CliIOError(f"mask shape {mask.shape} does not match {a.shape[-2:]}")
    try:
        rep = report(a, b, peak=args["peak"], mask=mask).to_dict()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    text = json.dumps(rep, indent=2, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    return EXIT_OK


def cmd_replay(args: dict, workdir: Path, out: Path) -> int:
    mpath = _path(workdir, args["manifest"])
    try:
        m = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliIOError(f"cannot read manifest {mpath}: {exc}") from exc
    if m.get("tool") != "cora" or m.get("command") not in ("invert", "edit", "sweep"):
        raise UsageError(f"{mpath} is not a replayable cora manifest")
    if m["version"] != __version__:
        log.warning("manifest written by cora %s, running %s", m["version"], __version__)
    return COMMANDS[m["command"]](dict(m["args"]), workdir, out)


COMMANDS = {"invert": cmd_invert, "edit": cmd_edit, "sweep": cmd_sweep, "metrics": cmd_metrics,
            "replay": cmd_replay}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    workdir = Path(ns.workdir)
    args = vars(ns).copy()
    for key in ("workdir", "verbose", "command"):
        args.pop(key)
    out = args.get("out")
    out = None if out is None else _path(workdir, out)
    try:
        return COMMANDS[ns.command](args, workdir, out)
    except UsageError as exc:
        print(f"cora: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CliIOError as exc:
        print(f"cora: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConsistencyError as exc:
        print(f"cora: consistency error: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except EditError as exc:
        print(f"cora: edit failed: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY


if __name__ == "__main__":
    sys.exit(main())
