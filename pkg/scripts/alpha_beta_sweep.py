"""In-process alpha/beta sweep with per-tile statistics.

For one source image and target prompt, runs the edit over an alpha x beta
grid and reports latent MSE to the source, masked-background PSNR, share of
queries moved by the step-1 permutation and novelty counts. Writes a labelled
grid image when ``--grid`` is given.

    python3 scripts/alpha_beta_sweep.py --target "a photo of a dog" --n 5 --grid sweep.png
"""
import argparse
import sys

import numpy as np

from cora.denoiser import DenoiserConfig, ToyDenoiser, embed_prompt
from cora.mixing import STRATEGIES
from cora.pipeline import EditConfig, edit
from cora.schedule import NoiseSchedule, invert
from cora.tensor import Rng, image_to_latent, latent_to_rgb, to_uint8, write_image


def synthetic_scene(size, seed):
    """A coloured disk on a smooth two-colour gradient."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    c0, c1, disk = rng.uniform(0.1, 0.9, (3, 3))
    img = (1 - yy)[..., None] * c0 + yy[..., None] * c1
    cy, cx = rng.uniform(0.35, 0.65, 2)
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 < 0.2 ** 2
    img[inside] = disk
    return img


def centre_mask(hw, frac=0.5):
    m = np.zeros((hw, hw), np.float32)
    lo = int(round(hw * (1 - frac) / 2))
    m[lo:hw - lo, lo:hw - lo] = 1
    return m


def sweep(args):
    img = synthetic_scene(args.size, args.image_seed)
    x0 = image_to_latent(img)
    den = ToyDenoiser(DenoiserConfig.for_latent(x0.shape[1], weight_seed=args.weight_seed))
    rec = invert(x0, embed_prompt(args.source, den.config.d_model), NoiseSchedule(), den,
                 Rng(args.noise_seed), prompt=args.source)
    mask = centre_mask(x0.shape[1]) if args.mask else None
    values = np.linspace(0, 1, args.n)
    rows, tiles = [], []
    for b in values:
        tile_row = []
        for a in values:
            cfg = EditConfig(alpha=float(a), beta=float(b), tgt_prompt=args.target, strategy=args.strategy,
                             mask=mask)
            x, diag = edit(rec, cfg, den)
            d = x.astype(np.float64) - x0
            moved = np.mean([np.mean(p.pi != np.arange(len(p.pi))) for p in diag.step(1).plans])
            bg = np.ones(x0.shape[1:], bool) if mask is None else mask == 0
            bg_mse = float(np.mean(d[:, bg] ** 2))
            rows.append({
                "alpha": float(a),
                "beta": float(b),
                "mse": float(np.mean(d ** 2)),
                "bg_psnr": np.inf if bg_mse == 0 else 10 * np.log10(4.0 / bg_mse),
                "moved": float(moved),
                "novel": sum(s.norms["n_novel_patches"] for s in diag.steps),
            })
            tile_row.append(to_uint8(latent_to_rgb(x)))
        tiles.append(np.concatenate(tile_row, axis=1))
    return rows, np.concatenate(tiles, axis=0)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--source", default="a photo of a cat")
    p.add_argument("--target", default="a photo of a dog")
    p.add_argument("--n", type=int, default=3, help="grid points per axis")
    p.add_argument("--strategy", choices=STRATEGIES, default="slerp")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--image-seed", type=int, default=0)
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--weight-seed", type=int, default=0)
    p.add_argument("--mask", action="store_true", help="protect everything outside a centre square")
    p.add_argument("--grid", default=None, help="write the tile grid (rows = beta, columns = alpha)")
    args = p.parse_args(argv)

    rows, grid = sweep(args)
    print(f"{'alpha':>6} {'beta':>6} {'mse':>10} {'bg dB':>8} {'moved':>6} {'novel':>6}")
    for r in rows:
        print(f"{r['alpha']:6.2f} {r['beta']:6.2f} {r['mse']:10.4g} {r['bg_psnr']:8.1f} "
              f"{r['moved']:6.2f} {r['novel']:6d}")
    if args.grid:
        write_image(grid, args.grid)
    return 0


if __name__ == "__main__":
    sys.exit(main())
