"""Alternating GAN training with FSMR and the other discriminator regularizers."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .config import TrainConfig, from_dict, to_ini
from .core import channel_stats
from .data import (BatchStream, augment_flip_crop, load_image_dir, materialize, normalize,
                   save_grid, style_pack, synthetic_dataset)
from .errors import ConfigError, DivergenceError
from .metrics import frechet_between, relative_distance
from .networks import Discriminator, Generator, load_archive, save_archive
from .regularizers import (bcr_loss, disc_adv_loss, fsmr_loss, gen_adv_loss,
                           onthefly_consistency_loss, r1_penalty, total_disc_loss)
from .stylizer import Stylizer, pixel_adain_fallback

log = logging.getLogger(__name__)

LOGIT_LIMIT = 1e4
METRIC_COLUMNS = ("iteration", "d_loss", "g_loss", "fsmr", "r1", "bcr", "otf", "rho", "frechet")


@dataclass
class TrainState:
    gen: Generator
    disc: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: torch.Generator
    iteration: int = 0
    gen_ema: Optional[Generator] = None
    stream: Optional[BatchStream] = None
    styles: Optional[torch.Tensor] = None
    stylizer: object = None


def build_state(config: TrainConfig, images: Optional[torch.Tensor] = None) -> TrainState:
    """Fresh networks, optimizers and random streams for ``config``."""
    config.validate()
    m, o = config.model, config.optim
    gen = Generator(m.resolution, m.channels, m.latent_dim, m.gen_widths, seed=config.seed)
    disc = Discriminator(m.resolution, m.channels, m.disc_widths, m.activation,
                         seed=config.seed + 1)
    betas = (o.beta1, o.beta2)
    opt_g = torch.optim.Adam(gen.parameters(), lr=o.lr, betas=betas, eps=o.eps)
    opt_d = torch.optim.Adam(disc.parameters(), lr=o.lr, betas=betas, eps=o.eps)
    gen_ema = None
    if config.ema_decay > 0:
        gen_ema = Generator(m.resolution, m.channels, m.latent_dim, m.gen_widths)
        gen_ema.load_state_dict(gen.state_dict())
        gen_ema.requires_grad_(False)
    state = TrainState(gen, disc, opt_g, opt_d, torch.Generator().manual_seed(config.seed),
                       gen_ema=gen_ema)
    if images is not None:
        state.stream = BatchStream(images, config.batch_size, seed=config.seed,
                                   prefetch=config.prefetch)
    if config.otf.enabled:
        state.styles, state.stylizer = _otf_assets(config)
    return state


def _otf_assets(config: TrainConfig):
    res, ch = config.model.resolution, config.model.channels
    if config.otf.styles == "pack":
        styles = style_pack(config.otf.n_styles, seed=config.seed + 7, resolution=res)
    else:
        styles = load_image_dir(config.otf.styles, res, ch)
    if config.otf.stylizer == "fallback":
        sty = pixel_adain_fallback
    else:
        modules, _, _ = load_archive(config.otf.stylizer)
        sty = next((mod for mod in modules.values() if isinstance(mod, Stylizer)), None)
        if sty is None:
            raise ConfigError(f"otf.stylizer: no stylizer in {config.otf.stylizer}")
    return normalize(styles.images, config.data.normalization), sty


def _sample_latents(state: TrainState, n):
    return torch.randn(n, state.gen.latent_dim, generator=state.rng)


def arbitrary_stats_fn(rng: torch.Generator, mu_std: float, sigma_std: float):
    """Statistics provider drawing ``mu ~ N(0, mu_std^2)``, ``sigma ~ |N(0, sigma_std^2)|``."""
    def fn(_, x, __):
        shape = x.shape[:-2]
        mu = torch.randn(shape, generator=rng, dtype=x.dtype) * mu_std
        sigma = (torch.randn(shape, generator=rng, dtype=x.dtype) * sigma_std).abs()
        return mu, sigma
    return fn


def in_batch_stats_fn(_, x, y):
    st = channel_stats(y)
    return st.mu, st.sigma


def _disc_step(state: TrainState, reals, config: TrainConfig, stats_fn=None, ablation=False):
    """Shared body of :func:`disc_step` and :func:`ablation_arbitrary_stats`.

    Random draws from ``state.rng`` happen in a fixed order: latents, real
    FSMR (permutation, alpha), fake FSMR, bCR augmentations, style indices.
    """
    disc, policy = state.disc, config.mix.policy()
    state.disc.check_input(reals)
    with torch.no_grad():
        fakes = state.gen(_sample_latents(state, len(reals)))

    use_r1 = config.r1_gamma > 0
    reals_in = reals.detach().requires_grad_(use_r1)
    real_feats = disc.features(reals_in)
    fake_feats = disc.features(fakes)
    real_logits = disc.head(real_feats[-1]).squeeze(1)
    fake_logits = disc.head(fake_feats[-1]).squeeze(1)
    zero = real_logits.new_zeros(())

    adv = disc_adv_loss(real_logits, fake_logits)
    r1 = r1_penalty(disc, reals_in, config.r1_gamma, logits=real_logits) if use_r1 else zero

    fsmr = zero
    if policy.lambda_fsmr > 0:
        if policy.target in ("real_only", "both"):
            fsmr = fsmr + fsmr_loss(disc, reals_in, None, policy, state.rng, logits=real_logits,
                                    stats_fn=stats_fn, features=real_feats)
        if policy.target in ("fake_only", "both"):
            fsmr = fsmr + fsmr_loss(disc, fakes, None, policy, state.rng, logits=fake_logits,
                                    stats_fn=stats_fn, features=fake_feats)

    bcr = zero
    if config.bcr.enabled:
        def aug(x):
            return augment_flip_crop(x, state.rng, config.bcr.pad)
        bcr = bcr_loss(disc, reals, fakes, aug, config.bcr.lambda_real, config.bcr.lambda_fake,
                       real_logits=real_logits, fake_logits=fake_logits)

    otf = zero
    if config.otf.enabled:
        idx = torch.randint(0, len(state.styles), (len(reals),), generator=state.rng)
        otf = onthefly_consistency_loss(disc, reals, state.styles[idx], state.stylizer,
                                        logits=real_logits)

    total = total_disc_loss(adv, [(r1, 1.0), (fsmr, policy.lambda_fsmr), (bcr, 1.0),
                                  (otf, config.otf.weight if config.otf.enabled else 0.0)])
    components = {
        "adv": adv.item(), "r1": r1.item(), "fsmr": (policy.lambda_fsmr * fsmr).item(),
        "fsmr_raw": fsmr.item(), "bcr": bcr.item(),
        "otf": (config.otf.weight * otf).item() if config.otf.enabled else 0.0,
        "total": total.item(),
        "max_logit": max(real_logits.abs().max().item(), fake_logits.abs().max().item()),
    }
    diverged = not np.isfinite(components["total"]) or components["max_logit"] > LOGIT_LIMIT
    components["diverged"] = diverged
    if diverged:
        if not ablation:
            raise DivergenceError(f"discriminator diverged at iteration {state.iteration}",
                                  state.iteration, components)
        log.warning("ablation run diverged at iteration %d: %s", state.iteration, components)
        state.opt_d.zero_grad(set_to_none=True)
        return state, components

    state.opt_d.zero_grad(set_to_none=True)
    total.backward()
    state.opt_d.step()
    state.opt_d.zero_grad(set_to_none=True)
    return state, components


def disc_step(state: TrainState, reals, config: TrainConfig):
    """One discriminator update on ``reals`` plus freshly generated fakes.

    Returns ``(state, components)``; every component is the weighted
    contribution to ``components["total"]`` and disabled terms report 0.
    """
    return _disc_step(state, reals, config)


def ablation_arbitrary_stats(state: TrainState, reals, config: TrainConfig):
    """Discriminator step whose FSM targets arbitrary statistics instead of
    in-batch references. Divergence is logged, not raised."""
    ab = config.ablation
    if not ab.enabled:
        raise ConfigError("ablation.enabled must be set to run the arbitrary-statistics step")
    if ab.distribution == "in-batch":
        stats_fn = in_batch_stats_fn
    else:
        stats_fn = arbitrary_stats_fn(state.rng, ab.mu_std, ab.sigma_std)
    return _disc_step(state, reals, config, stats_fn=stats_fn, ablation=True)


def gen_step(state: TrainState, config: TrainConfig):
    """One non-saturating generator update; returns ``(state, loss)``."""
    z = _sample_latents(state, config.batch_size)
    loss = gen_adv_loss(state.disc(state.gen(z)))
    value = loss.item()
    if not np.isfinite(value) and not config.ablation.enabled:
        raise DivergenceError(f"generator loss non-finite at iteration {state.iteration}",
                              state.iteration, {"g_loss": value})
    state.opt_g.zero_grad(set_to_none=True)
    loss.backward()
    if np.isfinite(value):
        state.opt_g.step()
    state.opt_g.zero_grad(set_to_none=True)
    state.opt_d.zero_grad(set_to_none=True)
    if state.gen_ema is not None:
        update_ema(state.gen_ema, state.gen, config.ema_decay)
    return state, value


def update_ema(ema: Generator, live: Generator, decay: float):
    with torch.no_grad():
        for pe, pl in zip(ema.parameters(), live.parameters()):
            pe.lerp_(pl, 1.0 - decay)
        for be, bl in zip(ema.buffers(), live.buffers()):
            be.copy_(bl)


def train_iteration(state: TrainState, config: TrainConfig, reals=None):
    if reals is None:
        reals = next(state.stream)
    step = ablation_arbitrary_stats if config.ablation.enabled else disc_step
    state, comps = step(state, reals, config)
    state, g_loss = gen_step(state, config)
    state.iteration += 1
    comps["g_loss"] = g_loss
    return state, comps


# -- checkpoints --------------------------------------------------------------

def _optimizer_arrays(prefix, opt):
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            arrays[f"{prefix}/{idx}/{k}"] = v.detach().cpu().numpy()
    return arrays, sd["param_groups"]


def _restore_optimizer(opt, prefix, arrays, groups):
    state = {}
    for key, value in arrays.items():
        if not key.startswith(prefix + "/"):
            continue
        _, idx, name = key.split("/")
        state.setdefault(int(idx), {})[name] = torch.from_numpy(np.array(value))
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_checkpoint(path, state: TrainState, config: TrainConfig):
    modules = {"gen": state.gen, "disc": state.disc}
    if state.gen_ema is not None:
        modules["gen_ema"] = state.gen_ema
    arrays = {"rng": state.rng.get_state().numpy()}
    a, groups_d = _optimizer_arrays("opt_d", state.opt_d)
    arrays.update(a)
    a, groups_g = _optimizer_arrays("opt_g", state.opt_g)
    arrays.update(a)
    manifest = {
        "architecture": config.preset, "iteration": state.iteration,
        "config": config.to_dict(), "opt_groups": {"opt_d": groups_d, "opt_g": groups_g},
        "stream": (state.stream.state_dict()
                   if state.stream is not None and not state.stream.prefetch else None),
        "version": __version__,
    }
    return save_archive(path, modules, manifest, arrays)


def load_checkpoint(path, images: Optional[torch.Tensor] = None):
    """Rebuild ``(state, config)`` from :func:`save_checkpoint` output."""
    modules, manifest, arrays = load_archive(path)
    config = from_dict(manifest["config"])
    state = build_state(config, images)
    state.gen.load_state_dict(modules["gen"].state_dict())
    state.disc.load_state_dict(modules["disc"].state_dict())
    if state.gen_ema is not None and "gen_ema" in modules:
        state.gen_ema.load_state_dict(modules["gen_ema"].state_dict())
    groups = manifest["opt_groups"]
    _restore_optimizer(state.opt_d, "opt_d", arrays, groups["opt_d"])
    _restore_optimizer(state.opt_g, "opt_g", arrays, groups["opt_g"])
    state.rng.set_state(torch.from_numpy(np.array(arrays["rng"])))
    state.iteration = int(manifest["iteration"])
    if state.stream is not None and manifest.get("stream"):
        state.stream.load_state_dict(manifest["stream"])
    return state, config


# -- evaluation ---------------------------------------------------------------

def probe_sets(config: TrainConfig):
    """Held-out contents and the style pack used for in-training probing."""
    res = config.model.resolution
    if Path(config.data.source).is_dir():
        contents = materialize(config.data)
    else:
        contents = synthetic_dataset(config.data.source, config.log.probe_contents,
                                     seed=config.data.shuffle_seed + 10_000, resolution=res)
    styles = style_pack(16, seed=config.seed + 7, resolution=res)
    conv = config.data.normalization
    return (normalize(contents.images[:config.log.probe_contents], conv),
            normalize(styles.images, conv))


def evaluate(state: TrainState, config: TrainConfig, contents, styles, reals):
    """``rho`` with the pixel fallback stylizer and Fréchet distance of fakes
    vs. reals in the discriminator's embedding space."""
    report = relative_distance(state.disc, pixel_adain_fallback, contents, styles,
                               config.log.probe_pairs, seed=config.seed)
    gen = state.gen_ema or state.gen
    n = min(config.log.fid_samples, len(reals))
    was_training = gen.training
    gen.eval()
    with torch.no_grad():
        fakes = gen(_sample_latents_eval(gen, n, config.seed))
    gen.train(was_training)
    fd = frechet_between(state.disc, reals[:n], fakes)
    return report.rho, fd


def _sample_latents_eval(gen, n, seed):
    return torch.randn(n, gen.latent_dim, generator=torch.Generator().manual_seed(seed + 99))


# -- main loop ----------------------------------------------------------------

@dataclass
class RunResult:
    run_dir: Optional[Path]
    state: TrainState
    history: list = field(default_factory=list)
    diverged_at: Optional[int] = None


def _fmt(v):
    if v is None or v == "":
        return ""
    return repr(float(v))


def train(config: TrainConfig, dataset=None, run_dir=None, resume=None, progress=False):
    """Run the alternating loop for ``config.iterations`` total iterations.

    ``dataset`` is a normalized ``[N, C, H, W]`` tensor; ``None`` materializes
    ``config.data``. With ``run_dir`` the config snapshot, ``metrics.csv``,
    checkpoints and sample grids are written there. ``resume`` continues from
    a checkpoint written by an earlier run with the same config.
    """
    config.validate()
    if dataset is None:
        dataset = normalize(materialize(config.data).images, config.data.normalization)
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    if resume is not None:
        state, _ = load_checkpoint(resume, dataset)
    else:
        state = build_state(config, dataset)

    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.ini").write_text(to_ini(config))
        metrics_path = run_dir / "metrics.csv"
        new = resume is None or not metrics_path.exists()
        metrics_file = open(metrics_path, "w" if new else "a", newline="")
        writer = csv.DictWriter(metrics_file, fieldnames=METRIC_COLUMNS)
        if new:
            writer.writeheader()

    lg = config.log
    probe = probe_sets(config) if lg.eval_every and run_dir is not None else None
    sample_z = torch.randn(16, config.model.latent_dim,
                           generator=torch.Generator().manual_seed(config.seed + 123))
    result = RunResult(run_dir, state)
    start = time.time()
    try:
        while state.iteration < config.iterations:
            state, comps = train_iteration(state, config)
            it = state.iteration
            comps["iteration"] = it
            result.history.append(comps)
            if comps.get("diverged") and result.diverged_at is None:
                result.diverged_at = it
            if metrics_file is None:
                continue
            row = {"iteration": it, "d_loss": _fmt(comps["total"]), "g_loss": _fmt(comps["g_loss"]),
                   "fsmr": _fmt(comps["fsmr"]), "r1": _fmt(comps["r1"]), "bcr": _fmt(comps["bcr"]),
                   "otf": _fmt(comps["otf"]), "rho": "", "frechet": ""}
            if probe is not None and (it % lg.eval_every == 0 or it == config.iterations):
                rho, fd = evaluate(state, config, probe[0], probe[1], dataset)
                row["rho"], row["frechet"] = _fmt(rho), _fmt(fd)
                comps["rho"], comps["frechet"] = rho, fd
            writer.writerow(row)
            if lg.checkpoint_every and (it % lg.checkpoint_every == 0 or it == config.iterations):
                save_checkpoint(run_dir / "checkpoints" / f"ckpt_{it:06d}.npz", state, config)
            if lg.sample_every and (it % lg.sample_every == 0 or it == config.iterations):
                gen = state.gen_ema or state.gen
                was_training = gen.training
                gen.eval()
                with torch.no_grad():
                    save_grid(gen(sample_z), run_dir / "samples" / f"iter{it:04d}.png", nrow=4)
                gen.train(was_training)
            if progress and it % 100 == 0:
                log.info("iter %d  d=%.4f g=%.4f  (%.1fs)", it, comps["total"], comps["g_loss"],
                         time.time() - start)
    finally:
        if metrics_file is not None:
            metrics_file.close()
        if state.stream is not None:
            state.stream.close()
    if run_dir is not None:
        (run_dir / "summary.json").write_text(json.dumps(
            {"iterations": state.iteration, "diverged_at": result.diverged_at,
             "seconds": time.time() - start}, indent=2))
    return result


def latest_checkpoint(run_dir) -> Optional[Path]:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("ckpt_*.npz"))
    return ckpts[-1] if ckpts else None
