"""Alternating minimax training, learning-rate schedule and checkpoints.

One call to :meth:`CDDTrainer.alternate_step` performs, in order:

1. a least-squares update of both discriminators on real/fake patches;
2. a descent step of the representation player (generators and projection
   heads) on the encoder objective;
3. a step of the negative generators on ``-ac + lambda1 * div``, i.e. gradient
   ascent on the contrastive loss, using embeddings from the freshly updated
   encoder.

Every random draw of a step (crop positions, patch locations, noise) is seeded
from ``(seed, step)``, so runs are reproducible and resumable.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .config import TrainConfig
from .errors import CheckpointError, DataError, DivergenceError
from .imaging import UnpairedDataset, from_internal, sample_unpaired_batch, to_internal
from .networks import build_networks, sample_locations

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "ac", "adv", "cycle", "tv", "dc", "div", "enc", "neg", "lr")
DIVERGENCE_LIMIT = 1e4
NETWORK_FILES = ("G", "F", "D_G", "D_F", "heads_G", "heads_F", "neg_G", "neg_F")


def lr_schedule(epoch, cfg: TrainConfig, base=None) -> float:
    """Constant until ``decay_start``, then linear to zero at ``epochs``."""
    base = cfg.lr if base is None else base
    if epoch < cfg.decay_start:
        return base
    span = cfg.epochs - cfg.decay_start
    if span <= 0:
        return 0.0
    return base * max(0.0, 1.0 - (epoch - cfg.decay_start) / span)


def _step_seed(seed: int, step: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, step, stream]).generate_state(1)[0])


class StepContext:
    """Random draws shared by every evaluation within one step: patch
    locations, negative indices and noise, created lazily per direction."""

    def __init__(self, seed: int, step: int):
        self.gen = torch.Generator().manual_seed(_step_seed(seed, step, 1))
        self.cache = {}

    def locations(self, key, feats, num_patches):
        if (key, "loc") not in self.cache:
            self.cache[key, "loc"] = sample_locations(feats, num_patches, self.gen)
        return self.cache[key, "loc"]

    def noise(self, key, shape, dtype):
        if (key, "noise") not in self.cache:
            self.cache[key, "noise"] = tuple(
                torch.randn(shape, generator=self.gen).to(dtype) for _ in range(3))
        return self.cache[key, "noise"]

    def other_indices(self, key, tap, q, n):
        """For each of ``q`` queries, ``n`` distinct indices of the other queries."""
        if (key, "idx", tap) not in self.cache:
            draw = torch.rand(q, q - 1, generator=self.gen).argsort(dim=1)[:, :n]
            rows = torch.arange(q).unsqueeze(1)
            self.cache[key, "idx", tap] = draw + (draw >= rows).long()
        return self.cache[key, "idx", tap]


@dataclass
class Direction:
    key: str
    gen: str      # translator, e.g. G: hazy -> clean
    back: str     # reverse translator
    disc: str     # discriminator judging the translator's output domain
    heads: str
    neg: str


FORWARD = Direction("fwd", "G", "F", "D_G", "heads_G", "neg_G")
BACKWARD = Direction("bwd", "F", "G", "D_F", "heads_F", "neg_F")


class CDDTrainer:
    """Owns the networks, their optimizers and the step/epoch counters."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
        self.weights = cfg.loss_weights
        self.nets = build_networks(cfg.network_spec, cfg.seed, self.dtype)
        betas = (0.5, 0.999)
        self.opt_G = torch.optim.Adam(self.nets.generator_parameters(), lr=cfg.lr, betas=betas)
        self.opt_D = torch.optim.Adam(self.nets.discriminator_parameters(), lr=cfg.lr, betas=betas)
        self.opt_N = torch.optim.Adam(self.nets.negative_parameters(), lr=cfg.eta_neg, betas=betas)
        self.epoch = 0
        self.step = 0

    @property
    def directions(self):
        return (FORWARD, BACKWARD) if self.cfg.dual_cycle else (FORWARD,)

    @property
    def adversarial(self) -> bool:
        return self.cfg.negative_source == "adversarial"

    def set_lr(self, lr: float, lr_neg: float):
        for opt in (self.opt_G, self.opt_D):
            for group in opt.param_groups:
                group["lr"] = lr
        for group in self.opt_N.param_groups:
            group["lr"] = lr_neg

    # ------------------------------------------------------------------ data

    def sample_batch(self, dataset: UnpairedDataset, step=None):
        step = self.step if step is None else step
        rng = np.random.default_rng(_step_seed(self.cfg.seed, step, 0))
        pairs = [sample_unpaired_batch(dataset, self.cfg.crop, rng)
                 for _ in range(self.cfg.batch_size)]
        x = torch.cat([to_internal(h, self.dtype) for h, _ in pairs])
        y = torch.cat([to_internal(c, self.dtype) for _, c in pairs])
        return x, y

    # ------------------------------------------------------------ embeddings

    def embeddings(self, d: Direction, feats_src, feats_fake, ctx: StepContext):
        """Queries from the re-encoded output, positives from the input, at the
        same sampled locations."""
        heads = getattr(self.nets, d.heads)
        q = self.cfg.num_patches
        if not self.adversarial:
            q = max(q, self.cfg.negatives + 1)
        locs = ctx.locations(d.key, feats_src, q)
        return heads(feats_fake, locs), heads(feats_src, locs)

    def negative_bank(self, d: Direction, positives, ctx: StepContext, with_noise=0):
        """Adversarial bank ``(B, N, d)`` per tap, or for sampled negatives the
        positives themselves plus per-query indices of the other locations."""
        if not self.adversarial:
            idx = [ctx.other_indices(d.key, t, k.shape[1], min(self.cfg.negatives, k.shape[1] - 1))
                   for t, k in enumerate(positives)]
            return positives, idx
        neg = getattr(self.nets, d.neg)
        mean = [k.mean(dim=1).detach() for k in positives]
        shape = (positives[0].shape[0], self.cfg.negatives, self.cfg.noise_dim)
        noise = ctx.noise(d.key, shape, self.dtype)[with_noise]
        return neg(mean, noise), None

    def _translate(self, d: Direction, src):
        gen = getattr(self.nets, d.gen)
        back = getattr(self.nets, d.back)
        fake, feats_src = gen(src)
        rec, _ = back(fake)
        _, feats_fake = gen.encode(fake)
        return fake, rec, feats_src, feats_fake

    # ---------------------------------------------------------------- losses

    def encoder_terms(self, x, y, ctx: StepContext):
        """Loss terms of the representation player; negatives carry no gradient."""
        w = self.weights
        out = {}
        for d, src in zip(self.directions, (x, y)):
            fake, rec, fs, ff = self._translate(d, src)
            qry, pos = self.embeddings(d, fs, ff, ctx)
            with torch.set_grad_enabled(not self.adversarial):
                bank, idx = self.negative_bank(d, pos, ctx)
            out["ac_" + d.key] = L.adversarial_contrastive_loss(qry, pos, bank, w.tau, idx)
            out["adv_" + d.key] = L.gan_loss(getattr(self.nets, d.disc)(fake), True)
            out["cycle_" + d.key] = L.cycle_loss(rec, src)
            if d is FORWARD:
                dehazed = (fake + 1.0) / 2.0
                out["tv"] = L.tv_loss(dehazed)
                out["dc"] = L.dark_channel_loss(dehazed, self.cfg.dc_radius)
        for name in ("ac", "adv", "cycle"):
            out[name] = sum(out[f"{name}_{d.key}"] for d in self.directions)
        out["enc"] = L.encoder_objective(out, w)
        return out

    def negative_terms(self, x, y, ctx: StepContext):
        """Loss terms of the negative player; encoder outputs carry no gradient."""
        w = self.weights
        ac, div = [], []
        for d, src in zip(self.directions, (x, y)):
            with torch.no_grad():
                _, _, fs, ff = self._translate(d, src)
                qry, pos = self.embeddings(d, fs, ff, ctx)
            bank, _ = self.negative_bank(d, pos, ctx)
            ac.append(L.adversarial_contrastive_loss(qry, pos, bank, w.tau))
            neg = getattr(self.nets, d.neg)
            mean = [k.mean(dim=1) for k in pos]
            _, v1, v2 = ctx.noise(d.key, (pos[0].shape[0], self.cfg.negatives,
                                          self.cfg.noise_dim), self.dtype)
            div.append(L.diversity_loss(neg, mean, v1, v2))
        out = {"ac_neg": sum(ac), "div": sum(div)}
        out["neg"] = L.negative_objective(out["ac_neg"], out["div"], w)
        return out

    def discriminator_step(self, x, y):
        with torch.no_grad():
            fakes = {d.key: getattr(self.nets, d.gen)(src)[0]
                     for d, src in zip(self.directions, (x, y))}
        # D_G judges clean images (real: y), D_F judges hazy images (real: x)
        reals = {"fwd": y, "bwd": x}
        total, out = 0.0, {}
        for d in self.directions:
            disc = getattr(self.nets, d.disc)
            loss = 0.5 * (L.gan_loss(disc(reals[d.key]), True)
                          + L.gan_loss(disc(fakes[d.key]), False))
            out[d.disc] = loss
            total = total + loss
        self.opt_D.zero_grad(set_to_none=True)
        total.backward()
        self.opt_D.step()
        return out

    # ------------------------------------------------------------------ step

    def alternate_step(self, batch, probe: bool = False) -> dict:
        """One discriminator / representation / negative update on ``batch``.

        Returns the loss report as a dict of floats. With ``probe`` the report
        also carries ``enc_before``/``enc_after`` around the representation
        update and ``ac_before``/``ac_after`` around the negative update, each
        pair evaluated with identical random draws.
        """
        x, y = batch
        ctx = StepContext(self.cfg.seed, self.step)
        report = {k: v.item() for k, v in self.discriminator_step(x, y).items()}

        terms = self.encoder_terms(x, y, ctx)
        self.opt_G.zero_grad(set_to_none=True)
        terms["enc"].backward()
        self.opt_G.step()
        report.update({k: v.item() for k, v in terms.items()})
        if probe:
            report["enc_before"] = report["enc"]
            with torch.no_grad():
                report["enc_after"] = self.encoder_terms(x, y, ctx)["enc"].item()

        if self.adversarial:
            nterms = self.negative_terms(x, y, ctx)
            self.opt_N.zero_grad(set_to_none=True)
            nterms["neg"].backward()
            self.opt_N.step()
            report.update({k: v.item() for k, v in nterms.items()})
            if probe:
                report["ac_before"] = report["ac_neg"]
                with torch.no_grad():
                    report["ac_after"] = self.negative_terms(x, y, ctx)["ac_neg"].item()

        self.step += 1
        report["step"] = self.step
        self.check_divergence(report)
        return report

    def check_divergence(self, report):
        w = self.weights
        scaled = dict(report)
        if "tv" in scaled:
            scaled["tv"] = w.tv * scaled["tv"]  # raw TV grows with image area
        for k, v in scaled.items():
            if not math.isfinite(v) or abs(v) > DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"training diverged at step {self.step}: {k}={report[k]!r}", report)

    # ------------------------------------------------------------- inference

    @torch.no_grad()
    def dehaze(self, img) -> np.ndarray:
        return dehaze(self.nets.G, img, self.dtype)


@torch.no_grad()
def dehaze(generator, img, dtype=torch.float32) -> np.ndarray:
    """Run the hazy -> clean generator on an ``(H, W, 3)`` image of any size."""
    x = to_internal(img, dtype)
    h, w = x.shape[2:]
    f = generator.spec.factor
    ph, pw = (-h) % f, (-w) % f
    if ph or pw:
        x = torch.nn.functional.pad(x, (0, pw, 0, ph), mode="reflect" if min(h, w) > 1
                                    else "replicate")
    out, _ = generator(x)
    return from_internal(out[:, :, :h, :w])


# ---------------------------------------------------------------- checkpoints


def _atomic_torch_save(obj, path: Path):
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def save_checkpoint(trainer: CDDTrainer, directory) -> Path:
    """One file per network, one for optimizer moments, and ``manifest.json``
    (written last) with the network spec hash, epoch and step."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in NETWORK_FILES:
        _atomic_torch_save(getattr(trainer.nets, name).state_dict(), directory / f"{name}.pt")
    _atomic_torch_save({"G": trainer.opt_G.state_dict(), "D": trainer.opt_D.state_dict(),
                        "N": trainer.opt_N.state_dict()}, directory / "optim.pt")
    manifest = {
        "spec_hash": trainer.cfg.network_spec.digest(),
        "epoch": trainer.epoch,
        "step": trainer.step,
        "files": [f"{n}.pt" for n in NETWORK_FILES] + ["optim.pt"],
        "config": trainer.cfg.to_dict(),
    }
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    os.replace(tmp, directory / "manifest.json")
    return directory


def load_checkpoint(directory, cfg: TrainConfig | None = None) -> CDDTrainer:
    """Rebuild a trainer from a checkpoint directory.

    When ``cfg`` is given it replaces the stored config, but must describe the
    same networks.
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"no checkpoint found in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if cfg is None:
        stored = dict(manifest["config"])
        stored["taps"] = tuple(stored["taps"])
        cfg = TrainConfig(**stored)
    if cfg.network_spec.digest() != manifest["spec_hash"]:
        raise CheckpointError("checkpoint was written for a different network spec")
    trainer = CDDTrainer(cfg)
    for name in NETWORK_FILES:
        path = directory / f"{name}.pt"
        if not path.is_file():
            raise CheckpointError(f"checkpoint file missing: {path}")
        getattr(trainer.nets, name).load_state_dict(torch.load(path, weights_only=True))
    optim = torch.load(directory / "optim.pt", weights_only=True)
    trainer.opt_G.load_state_dict(optim["G"])
    trainer.opt_D.load_state_dict(optim["D"])
    trainer.opt_N.load_state_dict(optim["N"])
    trainer.epoch = manifest["epoch"]
    trainer.step = manifest["step"]
    return trainer


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    trainer: CDDTrainer
    metrics_path: Path
    checkpoint_dir: Path
    reports: list = field(default_factory=list)


def steps_per_epoch(cfg: TrainConfig, dataset: UnpairedDataset) -> int:
    return cfg.steps_per_epoch or max(1, math.ceil(len(dataset) / cfg.batch_size))


def train(cfg: TrainConfig, dataset: UnpairedDataset | None = None, resume: bool = False,
          callback=None) -> TrainResult:
    """Run the full schedule, writing ``metrics.csv`` and checkpoints under
    ``cfg.out_dir``. With ``resume`` training continues from
    ``out_dir/checkpoints/latest``.

    ``callback(trainer, report)`` is invoked after every step.
    """
    if dataset is None:
        if not cfg.hazy_dir or not cfg.clean_dir:
            raise DataError("no dataset given and data.hazy_dir/data.clean_dir unset")
        dataset = UnpairedDataset.from_dirs(cfg.hazy_dir, cfg.clean_dir)
    torch.set_num_threads(cfg.threads)
    out = Path(cfg.out_dir)
    ckpt_root = out / "checkpoints"
    out.mkdir(parents=True, exist_ok=True)
    trainer = load_checkpoint(ckpt_root / "latest", cfg) if resume else CDDTrainer(cfg)
    per_epoch = steps_per_epoch(cfg, dataset)
    metrics_path = out / "metrics.csv"
    mode = "a" if resume and metrics_path.exists() else "w"
    reports = []
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(METRIC_COLUMNS)
        while trainer.epoch < cfg.epochs:
            lr = lr_schedule(trainer.epoch, cfg)
            trainer.set_lr(lr, lr_schedule(trainer.epoch, cfg, cfg.eta_neg))
            done = trainer.step - trainer.epoch * per_epoch
            for _ in range(max(0, per_epoch - done)):
                report = trainer.alternate_step(trainer.sample_batch(dataset))
                report["lr"] = lr
                reports.append(report)
                writer.writerow([_fmt(report.get(c)) for c in METRIC_COLUMNS])
                if callback is not None:
                    callback(trainer, report)
            fh.flush()
            trainer.epoch += 1
            log.info("epoch %d/%d done (step %d, lr %.3g, enc %.4f)", trainer.epoch,
                     cfg.epochs, trainer.step, lr, reports[-1]["enc"] if reports else float("nan"))
            if trainer.epoch % cfg.checkpoint_every == 0 or trainer.epoch == cfg.epochs:
                save_checkpoint(trainer, ckpt_root / f"epoch_{trainer.epoch:04d}")
                save_checkpoint(trainer, ckpt_root / "latest")
    return TrainResult(trainer, metrics_path, ckpt_root / "latest", reports)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return repr(float(v))
