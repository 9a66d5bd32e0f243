"""Training loop, checkpoint archive, and evaluation helpers."""

import csv
import hashlib
import io
import json
import time
import zipfile
import zlib
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .network import ModelConfig, NoisePredictor
from .sampler import SamplerConfig, sample_ensemble
from .schedule import build_schedule, forward_noise
from .synthdata import load_corpus


class NumericalError(RuntimeError):
    """Raised when training hits a non-finite loss; carries a diagnostic
    snapshot (last batch ids, step indices, loss history tail)."""

    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    epochs: int = 20
    max_steps: int | None = None   # cap on optimizer steps, overrides epochs when hit
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    data_seed: int | None = None   # batch-order seed; defaults to seed
    lr_schedule: str = "constant"  # or "cosine": decay to ~0 over the run
    checkpoint_every: int = 0      # steps; 0 = final only
    eval_every: int = 0            # steps; 0 = never
    eval_chains: int = 1
    eval_steps: int = 25
    eval_limit: int = 8
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule_kind: str = "linear"
    T: int = 1000

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size, learning_rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


def masks_to_signal(masks: np.ndarray) -> torch.Tensor:
    """{0,1} masks -> {-1,+1} float tensors (the diffusion signal domain)."""
    return torch.as_tensor(np.asarray(masks), dtype=torch.float32) * 2.0 - 1.0


# ---------------------------------------------------------------------------
# checkpoint archive: a zip of <tensor name>.npy files plus manifest.json

def _content_hash(named: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(named):
        h.update(name.encode())
        h.update(np.ascontiguousarray(named[name]).tobytes())
    return h.hexdigest()


def _config_payload(cfg) -> dict:
    d = asdict(cfg)

    def fix(obj):
        if isinstance(obj, frozenset):
            return sorted(obj)
        if isinstance(obj, dict):
            return {k: fix(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [fix(v) for v in obj]
        return obj

    return fix(d)


def save_checkpoint(path, model: NoisePredictor, train_cfg: TrainConfig | None = None,
                    extra: dict | None = None) -> str:
    """Write the archive; returns the content hash."""
    named = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    manifest = {
        "tensors": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in named.items()},
        "model_config": _config_payload(model.cfg),
        "train_config": _config_payload(train_cfg) if train_cfg else None,
        "schedule_kind": train_cfg.schedule_kind if train_cfg else None,
        "content_hash": _content_hash(named),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name, arr in sorted(named.items()):
            buf = io.BytesIO()
            np.save(buf, arr)
            zf.writestr(f"{name}.npy", buf.getvalue())
    return manifest["content_hash"]


def load_checkpoint(path) -> tuple[NoisePredictor, dict]:
    """Rebuild the model from an archive; returns (model, manifest)."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        mc = dict(manifest["model_config"])
        mc["fusion_stages"] = frozenset(mc["fusion_stages"])
        model = NoisePredictor(ModelConfig(**mc))
        state = {}
        for name in manifest["tensors"]:
            arr = np.load(io.BytesIO(zf.read(f"{name}.npy")))
            state[name] = torch.as_tensor(arr)
    loaded_hash = _content_hash({k: v.numpy() for k, v in state.items()})
    if loaded_hash != manifest["content_hash"]:
        raise ValueError(f"checkpoint {path}: content hash mismatch")
    model.load_state_dict(state)
    return model, manifest


# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: NoisePredictor
    losses: list
    checkpoint_path: Path
    val_dice: list  # of (step, dice)


def evaluate_checkpointable(model, schedule, samples, chains: int = 1, steps: int = 100,
                            seed: int = 0, fusion: str = "staple",
                            oracle_gt: bool = False) -> metrics.MetricReport:
    """Mean test Dice/IoU of ensemble predictions over SegSamples.

    oracle_gt short-circuits prediction with the ground truth (pipeline
    self-check mode)."""
    pairs = []
    for sample in samples:
        if oracle_gt:
            pred = sample.mask
        else:
            sid_hash = zlib.crc32(sample.id.encode())  # stable across processes
            cfg = SamplerConfig(steps=steps, ensemble_size=chains,
                                seed=seed + sid_hash, fusion_method=fusion)
            pred = sample_ensemble(sample.image, model, schedule, cfg).fused
        pairs.append((sample.id, pred, sample.mask))
    return metrics.evaluate(pairs)


def _write_loss_curve(losses, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def train(cfg: TrainConfig, corpus_root, out_dir, log_every: int = 50,
          quiet: bool = True) -> TrainResult:
    """Train a noise predictor on the corpus's train split.

    Deterministic for a fixed (seed, data_seed) on single-threaded CPU.
    Writes loss CSV, loss-curve PNG, and checkpoint archives under out_dir.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_samples = list(load_corpus(corpus_root, "train", image_size=cfg.model.image_size))
    if not train_samples:
        raise ValueError("train split is empty")
    val_samples = list(load_corpus(corpus_root, "val", image_size=cfg.model.image_size))

    images = torch.as_tensor(np.stack([s.image for s in train_samples]))[:, None]
    x0_all = masks_to_signal(np.stack([s.mask for s in train_samples]))[:, None]
    ids = [s.id for s in train_samples]

    torch.manual_seed(cfg.seed)
    model = NoisePredictor(cfg.model)
    schedule = build_schedule(cfg.T, cfg.schedule_kind)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                            weight_decay=cfg.weight_decay)
    lr_sched = None
    if cfg.lr_schedule == "cosine":
        total = cfg.max_steps or cfg.epochs * -(-len(train_samples) // cfg.batch_size)
        lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    order_rng = np.random.default_rng(cfg.seed if cfg.data_seed is None else cfg.data_seed)

    n = len(train_samples)
    losses = []
    val_dice = []
    step = 0
    t0 = time.time()
    log_path = out / "train_log.csv"
    logf = open(log_path, "w", newline="")
    logger = csv.writer(logf)
    logger.writerow(["step", "loss", "lr", "wall_time"])
    ckpt_path = out / "checkpoint.zip"
    done = False
    try:
        for _epoch in range(cfg.epochs):
            order = order_rng.permutation(n)
            for lo in range(0, n, cfg.batch_size):
                batch = order[lo:lo + cfg.batch_size]
                x0 = x0_all[batch]
                img = images[batch]
                t = torch.randint(0, cfg.T, (len(batch),), generator=gen)
                noise = torch.randn(x0.shape, generator=gen)
                xt = forward_noise(schedule, x0, t, noise)
                pred = model(xt, img, t)
                loss_val = torch.mean((noise - pred) ** 2)
                if not torch.isfinite(loss_val):
                    raise NumericalError("non-finite training loss", snapshot={
                        "step": step,
                        "batch_ids": [ids[i] for i in batch],
                        "t": t.tolist(),
                        "loss_history_tail": losses[-20:],
                    })
                opt.zero_grad()
                loss_val.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                if lr_sched is not None:
                    lr_sched.step()
                step += 1
                losses.append(loss_val.item())
                logger.writerow([step, f"{losses[-1]:.6f}", opt.param_groups[0]["lr"],
                                 f"{time.time() - t0:.2f}"])
                if not quiet and step % log_every == 0:
                    print(f"step {step}: loss {np.mean(losses[-log_every:]):.4f}", flush=True)
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(out / f"checkpoint_{step:06d}.zip", model, cfg)
                if cfg.eval_every and step % cfg.eval_every == 0 and val_samples:
                    rep = evaluate_checkpointable(model, schedule,
                                                  val_samples[:cfg.eval_limit],
                                                  chains=cfg.eval_chains,
                                                  steps=cfg.eval_steps, seed=cfg.seed)
                    val_dice.append((step, rep.mean_dice))
                    model.train()
                if cfg.max_steps and step >= cfg.max_steps:
                    done = True
                    break
            if done:
                break
    finally:
        logf.close()
    save_checkpoint(ckpt_path, model, cfg)
    _write_loss_curve(losses, out / "loss_curve.png")
    return TrainResult(model=model, losses=losses, checkpoint_path=ckpt_path,
                       val_dice=val_dice)
