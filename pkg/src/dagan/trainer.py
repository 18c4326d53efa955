"""Adversarial + deep-supervised training, self-training rounds and checkpoints."""

from __future__ import annotations

import copy
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .data import (AugmentConfig, BiTemporalSample, DatasetManifest, augment, collate,
                   tile_pairs, stitch)
from .discriminator import Discriminator
from .generator import DANet
from .metrics import ConfusionMatrix, accumulate, compute_all
from .objectives import (LossReport, adversarial_d_loss, generator_loss, supervised_losses)

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """A loss became NaN or infinite; ``snapshot`` holds the offending iteration's values."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class FingerprintMismatch(ValueError):
    pass


def poly_lr(iteration: int, base_lr: float, max_iter: int, power: float = 0.9) -> float:
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1 - iteration / max_iter) ** power


@dataclass
class TrainState:
    generator: DANet
    discriminator: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: np.random.Generator
    iteration: int = 0
    best_f1: float = -1.0
    history: list = field(default_factory=list)


def _adam(params, cfg):
    t = cfg.train
    return torch.optim.Adam(params, lr=t.base_lr, betas=(t.beta1, t.beta2),
                            weight_decay=t.weight_decay)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


def build_state(cfg: ExperimentConfig) -> TrainState:
    seed_everything(cfg.seed, cfg.train.deterministic)
    g = DANet(cfg.model)
    d = Discriminator(tuple(cfg.model.disc_channels), conditional=cfg.model.cond_disc)
    return TrainState(g, d, _adam(g.parameters(), cfg), _adam(d.parameters(), cfg),
                      np.random.default_rng(cfg.seed))


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


def _discriminate(d, change_map, t1, t2):
    return d(change_map, t1, t2) if d.conditional else d(change_map)


def train_step(state: TrainState, batch, cfg: ExperimentConfig, schedule_step=None,
               max_iter=None) -> LossReport:
    """One iteration: ``m_steps`` alternations of a generator update (the
    discriminator frozen) followed by a discriminator update (the generator
    frozen). Non-adversarial variants only run the supervised generator update.

    The learning rate is ``poly_lr(schedule_step, ..., max_iter)``; both
    default to the state's iteration counter and ``cfg.train.max_iter``.
    """
    t1, t2, mask = collate(batch) if isinstance(batch, (list, tuple)) and \
        isinstance(batch[0], BiTemporalSample) else batch
    g, d = state.generator, state.discriminator
    max_iter = max_iter or cfg.train.max_iter
    step = state.iteration if schedule_step is None else schedule_step
    lr = poly_lr(min(step, max_iter), cfg.train.base_lr, max_iter, cfg.train.power)
    _set_lr(state.opt_g, lr)
    _set_lr(state.opt_d, lr)
    adversarial = cfg.model.adversarial
    g.train()
    d.train()

    for _ in range(cfg.train.m_steps):
        # generator half-step
        _requires_grad(d, False)
        pred = g(t1, t2)
        bce, dice = supervised_losses(pred.aux_maps, mask)
        loss_g = bce + dice
        if adversarial:
            l_g = generator_loss(_discriminate(d, pred.final_map, t1, t2))
            loss_g = loss_g + cfg.train.adv_weight * l_g
        else:
            l_g = torch.zeros(())
        _check_finite(loss_g, state, "generator", bce=bce, dice=dice, l_g=l_g)
        state.opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        state.opt_g.step()
        _requires_grad(d, True)

        # discriminator half-step
        if adversarial:
            _requires_grad(g, False)
            fake = pred.final_map.detach()
            l_d = adversarial_d_loss(_discriminate(d, mask, t1, t2), _discriminate(d, fake, t1, t2))
            _check_finite(l_d, state, "discriminator", l_d_adv=l_d)
            state.opt_d.zero_grad(set_to_none=True)
            l_d.backward()
            state.opt_d.step()
            _requires_grad(g, True)
        else:
            l_d = torch.zeros(())

    state.iteration += 1
    l_g, l_d, bce, dice = (float(v.detach()) for v in (l_g, l_d, bce, dice))
    report = LossReport(l_g, l_d, bce, dice, l_d + bce + dice)
    state.history.append({"iteration": state.iteration, "lr": lr, **report.as_dict()})
    return report


def _check_finite(loss, state, where, **parts):
    if not torch.isfinite(loss):
        snapshot = {"iteration": state.iteration, "phase": where,
                    **{k: float(v.detach()) for k, v in parts.items()}}
        raise NumericalError(f"non-finite {where} loss at iteration {state.iteration}: {snapshot}",
                             snapshot)


def batches(samples, batch_size, rng, aug: AugmentConfig | None = None):
    """Endless stream of shuffled batches, reshuffled every pass."""
    samples = list(samples)
    if not samples:
        raise ValueError("cannot train on an empty sample list")
    while True:
        order = rng.permutation(len(samples))
        for start in range(0, len(order), batch_size):
            chunk = [samples[i] for i in order[start:start + batch_size]]
            if len(chunk) < min(batch_size, len(samples)):
                continue
            if aug is not None:
                chunk = [augment(s, aug, rng) for s in chunk]
            yield chunk


# ---------------------------------------------------------------- inference

@torch.no_grad()
def predict(generator: DANet, samples, batch_size: int = 8) -> list[np.ndarray]:
    """Change probabilities ``[H, W]`` for each sample, in order."""
    generator.eval()
    out = []
    for start in range(0, len(samples), batch_size):
        t1, t2, _ = collate(samples[start:start + batch_size])
        out.extend(generator(t1, t2).final_map[:, 0].numpy())
    return out


@torch.no_grad()
def predict_tiled(generator: DANet, sample: BiTemporalSample, tile: int,
                  batch_size: int = 8) -> np.ndarray:
    """Tile a large pair, predict every tile, stitch the probabilities back."""
    tiles = tile_pairs([sample], tile)
    probs = predict(generator, tiles, batch_size)
    return stitch([(t.id, p) for t, p in zip(tiles, probs)])[sample.id]


def evaluate(generator: DANet, samples, batch_size: int = 8, threshold: float = 0.5,
             per_image: bool = False):
    if not len(samples):
        raise ValueError("cannot evaluate an empty sample list")
    cm = ConfusionMatrix()
    rows = []
    for s, p in zip(samples, predict(generator, list(samples), batch_size)):
        one = accumulate(ConfusionMatrix(), p, s.mask, threshold)
        rows.append((s.id, one))
        cm = cm + one
    return (cm, rows) if per_image else cm


# ---------------------------------------------------------------- self-training

def confusion_direction(cm: ConfusionMatrix) -> str:
    if cm.fp > cm.fn:
        return "fp"
    if cm.fn > cm.fp:
        return "fn"
    return "balanced"


PSEUDO_THRESHOLDS = {"fp": 0.6, "fn": 0.4, "balanced": 0.5}


@torch.no_grad()
def self_training_round(state: TrainState, train_manifest: DatasetManifest, val_cm: ConfusionMatrix,
                        cfg: ExperimentConfig, tau: float | None = None,
                        round_index: int = 1) -> DatasetManifest:
    """Append confident pseudo-labelled copies of the training pairs.

    The dominant validation error direction shifts the binarisation threshold:
    FP-heavy models binarise at 0.6, FN-heavy at 0.4. A pair is kept when its
    score exceeds ``tau``; the score is the discriminator's probability for
    adversarial variants and the mean prediction confidence ``|2p - 1|``
    otherwise.
    """
    tau = cfg.train.tau if tau is None else tau
    threshold = PSEUDO_THRESHOLDS[confusion_direction(val_cm)]
    originals = [s for s in train_manifest.samples if not s.pseudo]
    g, d = state.generator, state.discriminator
    g.eval()
    d.eval()
    added = []
    for start in range(0, len(originals), cfg.train.batch_size):
        chunk = originals[start:start + cfg.train.batch_size]
        t1, t2, _ = collate(chunk)
        prob = g(t1, t2).final_map
        if cfg.model.adversarial:
            scores = _discriminate(d, prob, t1, t2)
        else:
            scores = (2 * prob - 1).abs().mean(dim=(1, 2, 3))
        for s, p, score in zip(chunk, prob[:, 0].numpy(), scores.tolist()):
            if score > tau:
                added.append(replace(s, mask=(p >= threshold).astype(np.uint8),
                                     id=f"{s.id}_pl{round_index}", pseudo=True))
    if not added:
        log.warning("self-training round %d selected no samples (tau=%.3f)", round_index, tau)
    log.info("self-training round %d: +%d pseudo-labelled pairs (%s-heavy, threshold %.2f)",
             round_index, len(added), confusion_direction(val_cm), threshold)
    return DatasetManifest(list(train_manifest.samples) + added, train_manifest.split,
                           train_manifest.tile_size)


# ---------------------------------------------------------------- checkpoints

def state_dict(state: TrainState, cfg: ExperimentConfig) -> dict:
    return {
        "fingerprint": cfg.fingerprint(),
        "config": cfg.to_dict(),
        "iteration": state.iteration,
        "best_f1": state.best_f1,
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "numpy_rng": state.rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
    }


# A checkpoint is a zip of .npy arrays plus one JSON header. Unlike torch.save
# (which embeds a random serialization id and pickles shared objects by
# identity) the bytes depend only on the values, so save -> load -> save is
# byte-identical.
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def _npy(tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
    return buf.getvalue()


def _split_optimizer(name, sd, arrays):
    """Tensors of an optimizer state dict go to ``arrays``; the rest stays as JSON."""
    plain = {}
    for idx, slots in sd["state"].items():
        plain[str(idx)] = {}
        for key, value in slots.items():
            if torch.is_tensor(value):
                arrays[f"{name}/{idx}/{key}"] = value
                plain[str(idx)][key] = None
            else:
                plain[str(idx)][key] = value
    return {"state": plain, "param_groups": sd["param_groups"]}


def save_checkpoint(state: TrainState, cfg: ExperimentConfig, path) -> None:
    sd = state_dict(state, cfg)
    arrays = {"torch_rng": sd["torch_rng"]}
    for net in ("generator", "discriminator"):
        arrays.update({f"{net}/{k}": v for k, v in sd[net].items()})
    header = {k: sd[k] for k in ("fingerprint", "config", "iteration", "best_f1", "numpy_rng")}
    header["generator_keys"] = list(sd["generator"])
    header["discriminator_keys"] = list(sd["discriminator"])
    for opt in ("opt_g", "opt_d"):
        header[opt] = _split_optimizer(opt, sd[opt], arrays)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("header.json", _ZIP_TIME),
                    json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(arrays):
            zf.writestr(zipfile.ZipInfo(name + ".npy", _ZIP_TIME), _npy(arrays[name]))
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> dict:
    """Load a checkpoint into the same nested layout ``state_dict`` produces."""
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))

        def tensor(name):
            return torch.from_numpy(np.load(io.BytesIO(zf.read(name + ".npy")), allow_pickle=False))

        sd = {k: header[k] for k in ("fingerprint", "config", "iteration", "best_f1", "numpy_rng")}
        sd["torch_rng"] = tensor("torch_rng")
        for net in ("generator", "discriminator"):
            sd[net] = {k: tensor(f"{net}/{k}") for k in header[f"{net}_keys"]}
        for opt in ("opt_g", "opt_d"):
            state = {}
            for idx, slots in header[opt]["state"].items():
                state[int(idx)] = {k: tensor(f"{opt}/{idx}/{k}") if v is None else v
                                   for k, v in slots.items()}
            groups = header[opt]["param_groups"]
            for g in groups:
                if "betas" in g:
                    g["betas"] = tuple(g["betas"])
            sd[opt] = {"state": state, "param_groups": groups}
    return sd


def load_checkpoint(path, cfg: ExperimentConfig, restore_rng: bool = True) -> TrainState:
    blob = read_checkpoint(path)
    if blob["fingerprint"] != cfg.fingerprint():
        raise FingerprintMismatch(
            f"checkpoint {path} was written for model fingerprint {blob['fingerprint']}, "
            f"the current config has {cfg.fingerprint()}")
    state = build_state(cfg)
    state.generator.load_state_dict(blob["generator"])
    state.discriminator.load_state_dict(blob["discriminator"])
    state.opt_g.load_state_dict(blob["opt_g"])
    state.opt_d.load_state_dict(blob["opt_d"])
    state.iteration = blob["iteration"]
    state.best_f1 = blob["best_f1"]
    state.rng.bit_generator.state = blob["numpy_rng"]
    if restore_rng:
        torch.set_rng_state(blob["torch_rng"])
    return state


# ---------------------------------------------------------------- experiment driver

def fit(state: TrainState, samples, cfg: ExperimentConfig, iterations=None, val=None,
        log_file=None, best=None):
    """Run ``iterations`` train steps with a fresh poly schedule.

    When ``val`` samples are given the generator is scored every
    ``cfg.train.eval_every`` iterations (default: once per pass over the
    training set) and the best-F1 weights are copied into ``best``.
    """
    iterations = iterations or cfg.train.max_iter
    aug = None
    if cfg.train.augment:
        aug = AugmentConfig(cfg.data.hflip, cfg.data.vflip, tuple(cfg.data.crop_scale))
    stream = batches(samples, cfg.train.batch_size, state.rng, aug)
    every = cfg.train.eval_every or max(1, math.ceil(len(samples) / cfg.train.batch_size))
    for step in range(iterations):
        report = train_step(state, next(stream), cfg, schedule_step=step, max_iter=iterations)
        if log_file is not None:
            log_file.write(report.to_json(iteration=state.iteration) + "\n")
        if val and best is not None and ((step + 1) % every == 0 or step + 1 == iterations):
            f1 = compute_all(evaluate(state.generator, val))["f1"]
            if f1 > state.best_f1:
                state.best_f1 = f1
                best.clear()
                best.update(copy.deepcopy(state.generator.state_dict()))
    return state


def run_experiment(cfg: ExperimentConfig, manifests, out_dir=None):
    """Train, run ``cfg.train.rounds`` self-training rounds with retraining,
    restore the best-F1 generator and score every split.

    ``manifests`` is a ``(train, val, test)`` tuple or a ``{split: manifest}``
    mapping. Returns ``(state, report)``.
    """
    if isinstance(manifests, dict):
        train, val, test = (manifests.get(k, DatasetManifest([], k)) for k in ("train", "val", "test"))
    else:
        train, val, test = manifests
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
    state = build_state(cfg)
    best: dict = {}
    log_file = open(out / "losses.jsonl", "w") if out is not None else None
    try:
        phase_iters = cfg.train.max_iter
        _fit_phase(state, train.samples, cfg, phase_iters, val, log_file, best)
        for r in range(1, cfg.train.rounds + 1):
            reference = val.samples if len(val) else train.samples
            val_cm = evaluate(state.generator, reference)
            train = self_training_round(state, train, val_cm, cfg, round_index=r)
            _fit_phase(state, train.samples, cfg, phase_iters, val, log_file, best)
    finally:
        if log_file is not None:
            log_file.close()

    if best:
        state.generator.load_state_dict(best)
    report = {"variant": cfg.variant, "seed": cfg.seed, "iterations": state.iteration,
              "train_size": len(train)}
    originals = [s for s in train.samples if not s.pseudo]
    for name, samples in (("train", originals), ("val", val.samples), ("test", test.samples)):
        if samples:
            cm = evaluate(state.generator, samples)
            report[name] = {**compute_all(cm), "counts": cm.as_dict()}
    if out is not None:
        save_checkpoint(state, cfg, out / "checkpoint.pt")
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return state, report


def _fit_phase(state, samples, cfg, iterations, val, log_file, best):
    start = state.iteration
    fit(state, samples, cfg, iterations, val=val.samples if len(val) else None,
        log_file=log_file, best=best)
    assert state.iteration == start + iterations
