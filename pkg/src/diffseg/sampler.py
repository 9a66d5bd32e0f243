"""Reverse-diffusion sampling conditioned on an image, and the multi-chain
ensemble with consensus fusion."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import staple
from .schedule import NoiseSchedule, invert_noise, reverse_step, subsample_schedule

FUSION_METHODS = ("staple", "mean-vote")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 100
    ensemble_size: int = 25
    seed: int = 0
    threshold: float = 0.0
    fusion_method: str = "staple"

    def __post_init__(self):
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if self.fusion_method not in FUSION_METHODS:
            raise ValueError(f"fusion_method must be one of {FUSION_METHODS}")


@dataclass(frozen=True)
class EnsembleResult:
    samples: list            # of (H, W) uint8 masks
    fused: np.ndarray        # (H, W) uint8
    per_sample_seeds: list
    fusion_method: str
    steps: int


def chain_seed(base_seed: int, chain_index: int) -> int:
    """Deterministic per-chain seed, distinct across chain indices."""
    return int(np.random.SeedSequence([base_seed, chain_index]).generate_state(1)[0])


def _image_tensor(image, model) -> torch.Tensor:
    img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if img.ndim == 2:
        img = img[None, None]
    elif img.ndim == 3:  # (H, W, C) -> (1, C, H, W)
        img = img.permute(2, 0, 1)[None]
    size = model.cfg.image_size
    if img.shape[-2:] != (size, size):
        raise ValueError(f"image spatial size {tuple(img.shape[-2:])} != configured {size}")
    return img


def _run_chains(image, model, schedule: NoiseSchedule, steps: int, threshold: float,
                seeds: list[int]) -> list[np.ndarray]:
    """Run len(seeds) independent reverse chains, batched through the
    network. Each chain's noise stream comes from its own generator, so
    results do not depend on how chains are grouped."""
    if steps == schedule.T:
        reduced, idx = schedule, torch.arange(schedule.T)
    else:
        reduced, idx = subsample_schedule(schedule, steps)
    img = _image_tensor(image, model)
    B = len(seeds)
    size = model.cfg.image_size
    gens = [torch.Generator().manual_seed(s) for s in seeds]
    shape = (1, model.cfg.in_channels_mask, size, size)
    x = torch.cat([torch.randn(shape, generator=g) for g in gens])
    img_b = img.expand(B, -1, -1, -1)
    model.eval()
    with torch.no_grad():
        for t in range(reduced.T - 1, -1, -1):
            eps = model(x, img_b, int(idx[t]))
            # clipped denoising: clamp the implied clean signal to its valid
            # range and re-derive the noise estimate, so early mispredictions
            # cannot drive the chain off the signal manifold
            x0_hat = invert_noise(reduced, x, t, eps).clamp(-1.0, 1.0)
            abar = reduced.alpha_bars[t].to(x.dtype)
            eps = (x - torch.sqrt(abar) * x0_hat) / torch.sqrt(1.0 - abar)
            if t > 0:
                z = torch.cat([torch.randn(shape, generator=g) for g in gens])
            else:
                z = torch.zeros_like(x)
            x = reverse_step(reduced, x, eps, t, z)
    return [(x[b, 0].numpy() > threshold).astype(np.uint8) for b in range(B)]


def sample_one(image, model, schedule: NoiseSchedule, config: SamplerConfig,
               seed: int | None = None) -> np.ndarray:
    """One reverse chain from Gaussian noise to a thresholded binary mask."""
    s = config.seed if seed is None else seed
    return _run_chains(image, model, schedule, config.steps, config.threshold, [s])[0]


def sample_ensemble(image, model, schedule: NoiseSchedule, config: SamplerConfig,
                    batch_size: int = 8) -> EnsembleResult:
    """Run ensemble_size independent chains and fuse them."""
    seeds = [chain_seed(config.seed, i) for i in range(config.ensemble_size)]
    samples = []
    for i in range(0, len(seeds), batch_size):
        samples.extend(_run_chains(image, model, schedule, config.steps,
                                   config.threshold, seeds[i:i + batch_size]))
    fused = fuse_masks(samples, config.fusion_method)
    return EnsembleResult(samples=samples, fused=fused, per_sample_seeds=seeds,
                          fusion_method=config.fusion_method, steps=config.steps)


def fuse_masks(masks: list, method: str = "staple") -> np.ndarray:
    if method == "staple":
        if len(masks) == 1:
            return np.asarray(masks[0]).astype(np.uint8)
        est = staple.staple_fuse(staple.stack_from_masks(masks))
        return est.fused.reshape(np.asarray(masks[0]).shape)
    if method == "mean-vote":
        return (np.mean([np.asarray(m, dtype=np.float64) for m in masks], axis=0)
                >= 0.5).astype(np.uint8)
    raise ValueError(f"unknown fusion method {method!r}")


def write_ensemble(result: EnsembleResult, out_dir) -> None:
    """Emit per-sample and fused masks as 8-bit PNGs plus a provenance JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(result.samples):
        Image.fromarray((m * 255).astype(np.uint8)).save(out / f"sample_{i:03d}.png")
    Image.fromarray((result.fused * 255).astype(np.uint8)).save(out / "fused.png")
    (out / "provenance.json").write_text(json.dumps({
        "seeds": result.per_sample_seeds,
        "steps": result.steps,
        "fusion_method": result.fusion_method,
        "ensemble_size": len(result.samples),
    }, indent=2))
