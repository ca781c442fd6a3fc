"""Command-line front end: ``fsmr <command> ...``.

Commands write a ``manifest.json`` into their output directory before any
long computation. Output directories default to ``$FSMR_OUTPUT_ROOT``
(or ``./fsmr-runs``). Exit codes: 0 success, 2 configuration or input
errors, 3 degenerate metric, 4 training divergence.
"""

from __future__ import annotations

import argparse
import importlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import torch

from . import __version__
from .config import TrainConfig, config_hash, load_config
from .data import (load_image_dir, normalize, save_grid, save_image_dir, style_pack,
                   synthetic_dataset)
from .errors import (ConfigError, DegenerateMetricError, DivergenceError, InvalidInputError,
                     ShapeError)
from .metrics import (DistanceReport, frechet_between, relative_distance, write_reports)
from .networks import Discriminator, EmbeddingSpec, embed, load_archive, save_archive
from .stylizer import (FSMDecoder, Stylizer, decode_fsm_features, decode_plain,
                       pixel_adain_fallback, train_fsm_decoder, train_stylizer)
from .trainer import latest_checkpoint, train

log = logging.getLogger("fsmr")

EXIT_OK, EXIT_CONFIG, EXIT_METRIC, EXIT_DIVERGED = 0, 2, 3, 4
ALPHA_SWEEP = (0.0, 0.25, 0.5, 0.75, 1.0)


def output_root() -> Path:
    return Path(os.environ.get("FSMR_OUTPUT_ROOT", "fsmr-runs"))


def _out_dir(args, command):
    if args.out:
        return Path(args.out)
    return output_root() / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"


def write_manifest(out_dir: Path, command, config_path=None, resolved=None, seed=None):
    """Record what is about to run; ``resolved`` is hashed order-independently."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "config_hash": config_hash(resolved or {}),
        "output_dir": str(out_dir),
        "version": __version__,
        "seed": seed,
        "settings": resolved or {},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                      default=list))
    return manifest


# -- image sources ------------------------------------------------------------

def load_source(source, n, resolution, channels=3, seed=0, convention="[-1,1]"):
    """Normalized image tensor from a directory, ``"pack"`` (style pack) or a
    builtin synthetic id."""
    if Path(source).is_dir():
        images = load_image_dir(source, resolution, channels).images[:n]
    elif source == "pack":
        images = style_pack(n, seed=seed, resolution=resolution).images
    else:
        images = synthetic_dataset(source, n, seed=seed, resolution=resolution).images
    if images.shape[1] != resolution:
        raise ShapeError(f"{source!r} yields {images.shape[1]}px images, need {resolution}px")
    return normalize(images, convention)


def _checkpoint_path(path):
    path = Path(path)
    if path.is_dir():
        found = latest_checkpoint(path)
        if found is None:
            raise ConfigError(f"no checkpoints under {path}")
        return found
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    return path


def _load_disc(path):
    modules, manifest, _ = load_archive(_checkpoint_path(path))
    for module in modules.values():
        if isinstance(module, Discriminator):
            return module.eval(), manifest
    raise ConfigError(f"no discriminator in {path}")


def _load_module(path, cls, what):
    if path is None or not Path(path).exists():
        raise ConfigError(f"{what} artifact {path} not found")
    modules, _, _ = load_archive(path)
    for module in modules.values():
        if isinstance(module, cls):
            return module.eval()
    raise ConfigError(f"no {what} in {path}")


def _stylizer(spec):
    if spec in (None, "fallback"):
        return pixel_adain_fallback
    return _load_module(spec, Stylizer, "stylizer")


def _extractor(name, disc):
    """``disc`` / ``disc:flatten`` / ``disc:LAYER`` / ``pixels`` / ``module:function``."""
    if name == "pixels":
        return lambda x: x.flatten(1)
    if name == "disc" or name.startswith("disc:"):
        _, _, opt = name.partition(":")
        if opt == "flatten":
            spec = EmbeddingSpec(pooling="flatten")
        else:
            try:
                spec = EmbeddingSpec(layer=int(opt)) if opt else EmbeddingSpec()
            except ValueError:
                raise ConfigError(f"bad extractor option {opt!r}") from None
        return lambda x: embed(disc, x, spec)
    mod, _, fn = name.partition(":")
    try:
        return getattr(importlib.import_module(mod), fn)
    except (ImportError, AttributeError, ValueError) as exc:
        raise ConfigError(f"cannot import extractor {name!r}: {exc}") from None


# -- commands -----------------------------------------------------------------

def cmd_train(args):
    if args.config and not Path(args.config).exists():
        raise ConfigError(f"config {args.config} not found")
    text = Path(args.config).read_text() if args.config else None
    cfg: TrainConfig = load_config(text, args.set or [])
    out = _out_dir(args, "train")
    write_manifest(out, "train", args.config, cfg.to_dict(), cfg.seed)
    resume = _checkpoint_path(args.resume) if args.resume else None
    result = train(cfg, run_dir=out, resume=resume, progress=True)
    last = result.history[-1] if result.history else {}
    print(f"run directory: {out}")
    print(f"iterations: {result.state.iteration}  d_loss: {last.get('total', float('nan')):.5f}"
          f"  g_loss: {last.get('g_loss', float('nan')):.5f}")
    if result.diverged_at is not None:
        print(f"ablation run diverged at iteration {result.diverged_at}")
    return EXIT_OK


def cmd_probe(args):
    disc, manifest = _load_disc(args.checkpoint)
    out = _out_dir(args, "probe")
    write_manifest(out, "probe", None, {
        "checkpoint": str(args.checkpoint), "contents": args.contents, "styles": args.styles,
        "n_pairs": args.n_pairs, "stylizer": args.stylizer, "layer": args.layer}, args.seed)
    res, ch = disc.resolution, disc.in_channels
    contents = load_source(args.contents, args.n_contents, res, ch, seed=args.seed + 10_000)
    styles = load_source(args.styles, args.n_styles, res, ch, seed=args.seed + 7)
    report = relative_distance(disc, _stylizer(args.stylizer), contents, styles, args.n_pairs,
                               seed=args.seed, spec=EmbeddingSpec(layer=args.layer),
                               content_set_id=args.contents, style_set_id=args.styles,
                               model_id=args.model_id or str(args.checkpoint))
    csv_path = Path(args.csv) if args.csv else out / "probe.csv"
    jsonl_path = Path(args.jsonl) if args.jsonl else out / "probe.jsonl"
    write_reports([report], csv_path, jsonl_path)
    _print_report(report)
    return EXIT_OK


def _print_report(r: DistanceReport):
    print(f"{'model':<28} {'d_s':>10} {'d_c':>10} {'rho':>10} {'pairs':>6}")
    print(f"{r.model_id[-28:]:<28} {r.d_s_mean:>10.5f} {r.d_c_mean:>10.5f} {r.rho:>10.5f} "
          f"{r.n_pairs:>6}")


def cmd_stylize(args):
    sty = _stylizer(args.stylizer)
    res = args.resolution
    out = _out_dir(args, "stylize")
    write_manifest(out, "stylize", None, {
        "stylizer": args.stylizer, "contents": args.contents, "styles": args.styles,
        "n_contents": args.n_contents, "n_styles": args.n_styles, "resolution": res}, args.seed)
    contents = load_source(args.contents, args.n_contents, res, seed=args.seed)
    styles = load_source(args.styles, args.n_styles, res, seed=args.seed + 7)
    grid = stylize_grid(sty, contents, styles)
    _write_layout(out, contents, styles, grid, "stylized.png")
    print(f"wrote {len(contents)}x{len(styles)} grid to {out}")
    return EXIT_OK


def stylize_grid(sty, contents, styles):
    """``[n_contents * n_styles, C, H, W]`` with row ``i`` holding content ``i``
    rendered in every style."""
    nc, ns = len(contents), len(styles)
    c = contents.repeat_interleave(ns, dim=0)
    s = styles.repeat(nc, 1, 1, 1)
    with torch.no_grad():
        return sty(c, s)


def _write_layout(out, contents, styles, grid, name):
    save_grid(contents, out / "contents.png", nrow=len(contents))
    save_grid(styles, out / "styles.png", nrow=len(styles))
    save_grid(grid.clamp(-1, 1), out / name, nrow=len(styles))


def cmd_visualize_fsm(args):
    disc, _ = _load_disc(args.checkpoint)
    dec = _load_module(args.decoder, FSMDecoder, "decoder")
    out = _out_dir(args, "visualize-fsm")
    alphas = ALPHA_SWEEP if args.alpha_sweep else (args.alpha,)
    write_manifest(out, "visualize-fsm", None, {
        "checkpoint": str(args.checkpoint), "decoder": str(args.decoder),
        "contents": args.contents, "styles": args.styles, "alphas": list(alphas)}, args.seed)
    res = disc.resolution
    contents = load_source(args.contents, args.n_contents, res, disc.in_channels, seed=args.seed)
    styles = load_source(args.styles, args.n_styles, res, disc.in_channels, seed=args.seed + 7)
    written = []
    with torch.no_grad():
        save_grid(decode_plain(dec, disc, contents).clamp(-1, 1), out / "reconstruction.png",
                  nrow=len(contents))
        for a in alphas:
            grid = fsm_grid(dec, disc, contents, styles, a)
            name = f"fsm_alpha{a:.2f}.png"
            _write_layout(out, contents, styles, grid, name)
            written.append(name)
    print(f"wrote {', '.join(written)} to {out}")
    return EXIT_OK


def fsm_grid(dec, disc, contents, styles, alpha):
    nc, ns = len(contents), len(styles)
    c = contents.repeat_interleave(ns, dim=0)
    s = styles.repeat(nc, 1, 1, 1)
    return decode_fsm_features(dec, disc, c, s, alpha)


def cmd_eval(args):
    modules, manifest, _ = load_archive(_checkpoint_path(args.checkpoint))
    disc = next((m for m in modules.values() if isinstance(m, Discriminator)), None)
    gen = modules.get("gen_ema") or modules.get("gen")
    if gen is None:
        raise ConfigError(f"no generator in {args.checkpoint}")
    res = disc.resolution if disc is not None else args.resolution
    reals = load_source(args.dataset, args.n, res, seed=args.seed)
    n = len(reals)
    out = _out_dir(args, "eval")
    write_manifest(out, "eval", None, {
        "checkpoint": str(args.checkpoint), "dataset": args.dataset, "extractor": args.extractor,
        "n_real": n, "n_fake": n}, args.seed)
    if args.extractor.startswith("disc") and disc is None:
        raise ConfigError("extractor 'disc' needs a discriminator in the checkpoint")
    extractor = _extractor(args.extractor, disc)
    gen.eval()
    with torch.no_grad():
        z = torch.randn(n, gen.latent_dim, generator=torch.Generator().manual_seed(args.seed))
        fakes = gen(z)
    if fakes.shape[1:] != reals.shape[1:]:
        raise ShapeError(f"generator output {tuple(fakes.shape[1:])} does not match dataset "
                         f"{tuple(reals.shape[1:])}")
    try:
        fd = frechet_between(extractor, reals, fakes)
    except (RuntimeError, ValueError) as exc:
        if isinstance(exc, (DegenerateMetricError, ConfigError)):
            raise
        raise ConfigError(f"extractor {args.extractor!r} failed on the inputs: {exc}") from None
    result = {"frechet": fd, "n_real": n, "n_fake": n, "extractor": args.extractor}
    (out / "eval.json").write_text(json.dumps(result, indent=2))
    print(f"frechet distance ({args.extractor}, {n} real / {n} fake): {fd:.6f}")
    return EXIT_OK


def cmd_train_stylizer(args):
    out = _out_dir(args, "train-stylizer")
    write_manifest(out, "train-stylizer", None, {
        "contents": args.contents, "styles": args.styles, "steps": args.steps,
        "resolution": args.resolution}, args.seed)
    contents = load_source(args.contents, args.n_contents, args.resolution, seed=args.seed)
    styles = load_source(args.styles, args.n_styles, args.resolution, seed=args.seed + 7)
    sty = train_stylizer(contents, styles, steps=args.steps, seed=args.seed)
    path = save_archive(out / "stylizer.npz", {"stylizer": sty}, {"kind": "stylizer"})
    print(f"stylizer saved to {path} (final loss {sty.history[-1]['loss']:.4f})")
    return EXIT_OK


def cmd_train_decoder(args):
    disc, _ = _load_disc(args.checkpoint)
    out = _out_dir(args, "train-decoder")
    write_manifest(out, "train-decoder", None, {
        "checkpoint": str(args.checkpoint), "dataset": args.dataset, "steps": args.steps,
        "tap_layer": args.tap_layer}, args.seed)
    images = load_source(args.dataset, args.n, disc.resolution, disc.in_channels, seed=args.seed)
    dec = train_fsm_decoder(disc, images, args.tap_layer, steps=args.steps, seed=args.seed)
    path = save_archive(out / "decoder.npz", {"decoder": dec}, {"kind": "fsm-decoder"})
    print(f"decoder saved to {path} (final loss {dec.history[-1]['loss']:.4f})")
    return EXIT_OK


def cmd_export_styles(args):
    out = Path(args.out) if args.out else output_root() / "styles"
    save_image_dir(style_pack(args.n, seed=args.seed, resolution=args.resolution), out, "style")
    print(f"wrote {args.n} style images to {out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="fsmr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=0):
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, default=seed)

    sp = sub.add_parser("train", help="train a GAN from a config file")
    sp.add_argument("--config", help="INI config file")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a setting")
    sp.add_argument("--resume", help="checkpoint file or run directory")
    sp.add_argument("--out", help="run directory")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("probe", help="relative style/content distance of a discriminator")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--contents", default="colored-shapes")
    sp.add_argument("--styles", default="pack")
    sp.add_argument("--n-contents", type=int, default=256)
    sp.add_argument("--n-styles", type=int, default=16)
    sp.add_argument("--n-pairs", type=int, default=1024)
    sp.add_argument("--stylizer", default="fallback", help="'fallback' or stylizer archive")
    sp.add_argument("--layer", type=int, default=-1, help="discriminator layer to embed")
    sp.add_argument("--model-id")
    sp.add_argument("--csv")
    sp.add_argument("--jsonl")
    common(sp)
    sp.set_defaults(fn=cmd_probe)

    sp = sub.add_parser("stylize", help="content x style grid through a stylizer")
    sp.add_argument("--stylizer", default="fallback")
    sp.add_argument("--contents", default="colored-shapes")
    sp.add_argument("--styles", default="pack")
    sp.add_argument("--n-contents", type=int, default=4)
    sp.add_argument("--n-styles", type=int, default=4)
    sp.add_argument("--resolution", type=int, default=32)
    common(sp)
    sp.set_defaults(fn=cmd_stylize)

    sp = sub.add_parser("visualize-fsm", help="decode FSM-mixed discriminator features")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--decoder", required=True)
    sp.add_argument("--contents", default="colored-shapes")
    sp.add_argument("--styles", default="pack")
    sp.add_argument("--n-contents", type=int, default=4)
    sp.add_argument("--n-styles", type=int, default=4)
    sp.add_argument("--alpha", type=float, default=0.0)
    sp.add_argument("--alpha-sweep", action="store_true",
                    help="one grid per alpha in 0, 0.25, 0.5, 0.75, 1")
    common(sp)
    sp.set_defaults(fn=cmd_visualize_fsm)

    sp = sub.add_parser("eval", help="Fréchet distance of generated vs. real images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", default="colored-shapes")
    sp.add_argument("--n", type=int, default=1000, help="number of real (and fake) images")
    sp.add_argument("--extractor", default="disc",
                    help="disc, disc:flatten, disc:LAYER, pixels or module:function")
    sp.add_argument("--resolution", type=int, default=32)
    common(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("train-stylizer", help="fit the encoder/decoder stylizer")
    sp.add_argument("--contents", default="colored-shapes")
    sp.add_argument("--styles", default="pack")
    sp.add_argument("--n-contents", type=int, default=512)
    sp.add_argument("--n-styles", type=int, default=16)
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--resolution", type=int, default=32)
    common(sp)
    sp.set_defaults(fn=cmd_train_stylizer)

    sp = sub.add_parser("train-decoder", help="fit a decoder for FSM visualization")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", default="colored-shapes")
    sp.add_argument("--n", type=int, default=512)
    sp.add_argument("--tap-layer", type=int)
    sp.add_argument("--steps", type=int, default=300)
    common(sp)
    sp.set_defaults(fn=cmd_train_decoder)

    sp = sub.add_parser("export-styles", help="write the procedural style pack as PNGs")
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--resolution", type=int, default=32)
    common(sp)
    sp.set_defaults(fn=cmd_export_styles)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"components at iteration {exc.iteration}: {exc.components}", file=sys.stderr)
        return EXIT_DIVERGED
    except DegenerateMetricError as exc:
        print(f"error: degenerate metric: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except (ConfigError, ShapeError, InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
