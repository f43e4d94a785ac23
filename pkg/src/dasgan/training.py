"""Alternating adversarial training plus the three comparison baselines.

The joint mode updates the two discriminators first (adversarial + pixel
cross-entropy on real and freshly generated images, pooled fakes for the
adversarial term), then the two generators (adversarial + cycle + the
segmentation feedback of the frozen discriminators on the generated
images). Baseline modes train the domain-A discriminator architecture
without its realism head as a plain supervised segmentation network.

All randomness flows from ``TrainConfig.seed``: the torch RNG seeds network
init, a numpy generator drives batch sampling and the image pools.
"""

from __future__ import annotations

import csv
import hashlib
import json
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import DatasetSplit, Domain, IGNORE, ImagePatch, LabelMask, TC_NEG, TC_POS, save_split
from .errors import (
    ConfigurationError,
    InvalidArgumentError,
    TrainingDivergenceError,
)
from .evaluate import split_f1
from .losses import (
    LossReport,
    LossWeights,
    adversarial_loss_d,
    adversarial_loss_g,
    cross_entropy_term,
    cycle_loss,
    total_loss,
)
from .networks import (
    DiscriminatorSpec,
    DualHeadDiscriminator,
    GeneratorSpec,
    MaskConditionedGenerator,
    NetworkBundle,
    load_checkpoint,
    save_checkpoint,
)

MODES = ("dasgan", "seg_only_real", "seg_only_synth", "two_step")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "dasgan"
    iterations: int = 5000
    batch_size: int = 4
    g_lr: float = 1e-4
    d_lr: float = 5e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 7
    pool_size: int = 50
    checkpoint_every: int = 500
    symmetric_seg: bool = True
    # Iterations before generated images join the segmentation CE (both the
    # discriminator-side term and the generator feedback). Keeps the early,
    # untrained translation from poisoning the segmentation heads.
    seg_warmup: int = 300
    gen_spec: GeneratorSpec = field(default_factory=GeneratorSpec)
    disc_spec: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    out_dir: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.iterations <= 0 or self.batch_size <= 0:
            raise ConfigurationError("iterations and batch_size must be > 0")
        if self.g_lr <= 0 or self.d_lr <= 0:
            raise ConfigurationError("learning rates must be > 0")


def config_hash(config: TrainConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


class ImagePool:
    """Replay buffer of previously generated images for discriminator updates."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.buffer: list = []

    def query(self, fresh: torch.Tensor, rng) -> torch.Tensor:
        return pool_sample(self, fresh, rng)


def pool_sample(pool: ImagePool, fresh: torch.Tensor, rng) -> torch.Tensor:
    """Mix fresh fakes with stored ones.

    Until the pool is full, fresh images are stored and returned. Afterwards
    each image is, with probability 0.5, swapped against a random stored one
    (the stored image is returned, the fresh one takes its slot).
    """
    if pool.capacity == 0:
        return fresh
    out = []
    for image in fresh:
        image = image.detach()
        if len(pool.buffer) < pool.capacity:
            pool.buffer.append(image.clone())
            out.append(image)
        elif rng.random() < 0.5:
            idx = int(rng.integers(0, len(pool.buffer)))
            out.append(pool.buffer[idx])
            pool.buffer[idx] = image.clone()
        else:
            out.append(image)
    return torch.stack(out)


@dataclass
class Checkpoint:
    path: str
    iteration: int
    mean_f1: float | None = None


@dataclass
class TrainState:
    """Mutable training context owned by a single train loop."""

    config: TrainConfig
    bundle: torch.nn.Module
    g_opt: torch.optim.Optimizer | None
    d_opt: torch.optim.Optimizer
    rng: np.random.Generator
    pool_a: ImagePool
    pool_b: ImagePool
    iteration: int = 0
    best_f1: float = float("-inf")
    best_checkpoint: str = ""
    checkpoints: list = field(default_factory=list)


def _set_requires_grad(modules, flag: bool):
    for module in modules:
        for p in module.parameters():
            p.requires_grad_(flag)


def _onehot(labels: torch.Tensor, num_classes: int = 3) -> torch.Tensor:
    oh = torch.zeros(labels.shape[0], num_classes, *labels.shape[1:], dtype=torch.float32)
    for c in range(num_classes):
        oh[:, c] = labels == c
    return oh


def _nhwc(probs: torch.Tensor) -> torch.Tensor:
    return probs.permute(0, 2, 3, 1)


def init_state(config: TrainConfig, bundle: torch.nn.Module | None = None) -> TrainState:
    """Seed the torch RNG, build networks and optimizers."""
    torch.manual_seed(config.seed)
    if bundle is None:
        bundle = NetworkBundle(config.gen_spec, config.disc_spec)
    if isinstance(bundle, NetworkBundle):
        g_opt = torch.optim.Adam(bundle.generator_parameters(), lr=config.g_lr,
                                 betas=(config.adam_beta1, config.adam_beta2))
        d_opt = torch.optim.Adam(bundle.discriminator_parameters(), lr=config.d_lr,
                                 betas=(config.adam_beta1, config.adam_beta2))
    else:
        g_opt = None
        d_opt = torch.optim.Adam(bundle.parameters(), lr=config.d_lr,
                                 betas=(config.adam_beta1, config.adam_beta2))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
    return TrainState(config=config, bundle=bundle, g_opt=g_opt, d_opt=d_opt, rng=rng,
                      pool_a=ImagePool(config.pool_size), pool_b=ImagePool(config.pool_size))


def _disc_update_terms(disc: DualHeadDiscriminator, real_x, real_y, fake_x, fake_y,
                       pool: ImagePool, rng, lambda_seg: float, include_fake_seg: bool):
    """Adversarial + per-domain CE terms for one discriminator.

    Pooled fakes feed only the realism head; fresh fakes (which carry usable
    masks) feed only the segmentation head, and only after the warmup.
    """
    pooled = pool.query(fake_x, rng)
    feats_real = disc.features(real_x)
    src_real = disc.source_from(feats_real)
    src_pooled = disc.source_scores(pooled)
    adv = adversarial_loss_d(src_real, src_pooled)
    if lambda_seg <= 0:
        return adv, None
    post_real = disc.posterior_from(feats_real)
    labels, probs = real_y, _nhwc(post_real)
    if include_fake_seg:
        post_fake = disc.segment(fake_x)
        labels = torch.cat([real_y, fake_y], dim=0)
        probs = torch.cat([probs, _nhwc(post_fake)], dim=0)
    return adv, cross_entropy_term(labels, probs)


def train_step(state: TrainState, batch_a, batch_b):
    """One discriminator update followed by one generator update.

    ``batch_a``/``batch_b`` are (images N3HW, labels NHW) tensor pairs from
    the two domains; domain-B labels are a conditioned variant (1s or 2s).
    Returns the state and the generator-side loss report.
    """
    cfg = state.config
    bundle = state.bundle
    weights = cfg.weights
    bundle.train()
    xa, ya = batch_a
    xb, yb = batch_b
    ya_oh, yb_oh = _onehot(ya), _onehot(yb)

    fake_b = bundle.g_ab(xa, ya_oh)
    fake_a = bundle.g_ba(xb, yb_oh)

    # Discriminators: real vs pooled fakes, plus pixel CE on real and fresh
    # fake images of their own domain (fresh ones carry usable masks).
    couple_fakes = state.iteration >= cfg.seg_warmup
    state.d_opt.zero_grad(set_to_none=True)
    adv_b, seg_b = _disc_update_terms(
        bundle.d_b, xb, yb, fake_b.detach(), ya, state.pool_b, state.rng,
        weights.lambda_seg, couple_fakes)
    adv_a, seg_a = _disc_update_terms(
        bundle.d_a, xa, ya, fake_a.detach(), yb, state.pool_a, state.rng,
        weights.lambda_seg, couple_fakes)
    d_total = adv_a + adv_b
    if seg_a is not None:
        d_total = d_total + weights.lambda_seg * (seg_a + seg_b)
    d_total.backward()
    state.d_opt.step()

    # Generators: adversarial + cycle + segmentation feedback through the
    # frozen discriminators applied to the generated images.
    _set_requires_grad([bundle.d_a, bundle.d_b], False)
    state.g_opt.zero_grad(set_to_none=True)
    feats_fake_b = bundle.d_b.features(fake_b)
    feats_fake_a = bundle.d_a.features(fake_a)
    gan_ab = adversarial_loss_g(bundle.d_b.source_from(feats_fake_b))
    gan_ba = adversarial_loss_g(bundle.d_a.source_from(feats_fake_a))
    cyc_a = bundle.g_ba(fake_b, ya_oh)
    cyc_b = bundle.g_ab(fake_a, yb_oh)
    cyc = cycle_loss(xa, cyc_a, xb, cyc_b)
    if weights.lambda_seg > 0 and couple_fakes:
        seg = cross_entropy_term(yb, _nhwc(bundle.d_a.posterior_from(feats_fake_a)))
        if cfg.symmetric_seg:
            seg = seg + cross_entropy_term(ya, _nhwc(bundle.d_b.posterior_from(feats_fake_b)))
    else:
        seg = torch.zeros(())
    g_total = total_loss(gan_ab, gan_ba, cyc, seg, weights)
    g_total.backward()
    state.g_opt.step()
    _set_requires_grad([bundle.d_a, bundle.d_b], True)

    try:
        report = LossReport.from_components(gan_ab.item(), gan_ba.item(), cyc.item(),
                                            seg.item(), weights)
    except TrainingDivergenceError as err:
        raise TrainingDivergenceError(
            f"iteration {state.iteration + 1}: {err.message}; components="
            f"({gan_ab.item():.4g}, {gan_ba.item():.4g}, {cyc.item():.4g}, {seg.item():.4g})"
        ) from err
    state.iteration += 1
    return state, report


def supervised_step(state: TrainState, batch):
    """One cross-entropy update of a plain segmentation network."""
    cfg = state.config
    net = state.bundle
    net.train()
    x, y = batch
    state.d_opt.zero_grad(set_to_none=True)
    probs = net.segment(x)
    ce = cross_entropy_term(y, _nhwc(probs))
    loss = cfg.weights.lambda_seg * ce
    loss.backward()
    state.d_opt.step()
    report = LossReport.from_components(0.0, 0.0, 0.0, ce.item(), cfg.weights)
    state.iteration += 1
    return state, report


# ---------------------------------------------------------------------------
# Dataset tensors and batch sampling
# ---------------------------------------------------------------------------

@dataclass
class _TensorSet:
    images: torch.Tensor
    labels: torch.Tensor

    def __len__(self):
        return self.images.shape[0]


def _tensorize(pairs) -> _TensorSet:
    images = np.stack([p.pixels for p, _ in pairs]).transpose(0, 3, 1, 2)
    labels = np.stack([m.labels for _, m in pairs]).astype(np.int64)
    return _TensorSet(torch.from_numpy(np.ascontiguousarray(images)).float(),
                      torch.from_numpy(labels))


def _sample(rng, data: _TensorSet, batch_size: int):
    idx = torch.from_numpy(rng.integers(0, len(data), size=batch_size))
    return data.images[idx], data.labels[idx]


def _sample_b_conditioned(rng, data: _TensorSet, batch_size: int):
    """Domain-B batch with a per-sample conditioned mask variant.

    Stored B masks mark epithelium as class 1; a fair coin per sample flips
    the target to class 2, so both variants appear across the stream.
    """
    x, y = _sample(rng, data, batch_size)
    flip = torch.from_numpy(rng.random(batch_size) < 0.5)
    y = y.clone()
    y[flip] = torch.where(y[flip] == TC_NEG, torch.tensor(TC_POS, dtype=y.dtype), y[flip])
    return x, y


def _labeled_pairs(pairs):
    return [(p, m) for p, m in pairs if (m.labels != IGNORE).any()]


# ---------------------------------------------------------------------------
# Full training runs
# ---------------------------------------------------------------------------

class _RunLog:
    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(("iteration",) + LossReport.CSV_FIELDS + ("wall_time",))

    def record(self, iteration: int, report: LossReport, wall: float):
        self._writer.writerow([iteration, report.gan_ab, report.gan_ba, report.cycle,
                               report.seg, report.total, f"{wall:.6f}"])

    def close(self):
        self._fh.flush()
        self._fh.close()


def _resolve_out_dir(config: TrainConfig) -> Path:
    if config.out_dir:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return out
    return Path(tempfile.mkdtemp(prefix="dasgan-run-"))


def _eval_and_checkpoint(state: TrainState, nets: dict, test_pairs, out_dir: Path,
                         chash: str) -> float:
    seg_model = nets["d_a"]
    seg_model.eval()
    f1 = split_f1(seg_model, test_pairs)["mean"]
    ckpt_dir = out_dir / "checkpoints" / f"iter_{state.iteration:06d}"
    save_checkpoint(ckpt_dir, nets, state.iteration, chash, metrics={"mean_f1": f1})
    state.checkpoints.append(Checkpoint(str(ckpt_dir), state.iteration, f1))
    if f1 >= state.best_f1:
        state.best_f1 = f1
        state.best_checkpoint = str(ckpt_dir)
    return f1


def _run_dasgan(state: TrainState, data, out_dir: Path, log: _RunLog, chash: str,
                evaluate: bool = True):
    cfg = state.config
    train_a = _tensorize(data.train_a)
    train_b = _tensorize(data.train_b)
    start_iter = state.iteration
    for _ in range(cfg.iterations):
        t0 = time.perf_counter()
        batch_a = _sample(state.rng, train_a, cfg.batch_size)
        batch_b = _sample_b_conditioned(state.rng, train_b, cfg.batch_size)
        state, report = train_step(state, batch_a, batch_b)
        log.record(state.iteration, report, time.perf_counter() - t0)
        done = state.iteration - start_iter
        if evaluate and (done % cfg.checkpoint_every == 0 or done == cfg.iterations):
            _eval_and_checkpoint(state, state.bundle.networks(), data.test, out_dir, chash)
    return state


def _run_supervised(state: TrainState, pairs, test_pairs, out_dir: Path, log: _RunLog,
                    chash: str):
    cfg = state.config
    data = _tensorize(pairs)
    start_iter = state.iteration
    for _ in range(cfg.iterations):
        t0 = time.perf_counter()
        batch = _sample(state.rng, data, cfg.batch_size)
        state, report = supervised_step(state, batch)
        log.record(state.iteration, report, time.perf_counter() - t0)
        done = state.iteration - start_iter
        if done % cfg.checkpoint_every == 0 or done == cfg.iterations:
            _eval_and_checkpoint(state, {"d_a": state.bundle}, test_pairs, out_dir, chash)
    return state


def materialize_synthetic(generator: MaskConditionedGenerator, train_b, out_dir: Path,
                          batch_size: int = 8) -> list:
    """Translate every B patch under both conditioned variants into domain A.

    Writes the synthetic patches plus masks to ``out_dir`` and returns the
    (patch, mask) pairs.
    """
    generator.eval()
    pairs = []
    items = []
    for patch, mask in train_b:
        for variant, suffix in ((TC_NEG, "neg"), (TC_POS, "pos")):
            labels = np.where(mask.labels == TC_NEG, variant, mask.labels).astype(np.uint8)
            items.append((patch, labels, f"syn-{patch.id}-{suffix}"))
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start : start + batch_size]
            images = np.stack([p.pixels for p, _, _ in chunk]).transpose(0, 3, 1, 2)
            labels = torch.from_numpy(np.stack([l for _, l, _ in chunk]).astype(np.int64))
            out = generator(torch.from_numpy(np.ascontiguousarray(images)).float(),
                            _onehot(labels))
            out = out.permute(0, 2, 3, 1).numpy()
            for i, (_, lab, name) in enumerate(chunk):
                pairs.append((
                    ImagePatch(pixels=np.clip(out[i], 0.0, 1.0), domain=Domain.A, id=name),
                    LabelMask(labels=lab, domain=Domain.A),
                ))
    save_split(DatasetSplit(train_a=pairs), out_dir)
    return pairs


def train(config: TrainConfig, data) -> TrainState:
    """Run one full training job for the configured mode.

    Checkpoints land under ``<out>/checkpoints`` with test-split mean F1
    recorded; ``TrainState.best_checkpoint`` points at the selected model.
    """
    out_dir = _resolve_out_dir(config)
    (out_dir / "train_config.json").write_text(
        json.dumps(asdict(config), indent=2, sort_keys=True, default=str))
    chash = config_hash(config)
    log = _RunLog(out_dir / "training_log.csv")
    try:
        if config.mode == "dasgan":
            state = init_state(config)
            state = _run_dasgan(state, data, out_dir, log, chash)
        elif config.mode == "seg_only_real":
            pairs = _labeled_pairs(data.train_a)
            if not pairs:
                raise ConfigurationError("seg_only_real needs labeled domain-A patches")
            state = init_state(config, _make_seg_net(config))
            state = _run_supervised(state, pairs, data.test, out_dir, log, chash)
        elif config.mode in ("seg_only_synth", "two_step"):
            state = _run_two_phase(config, data, out_dir, log, chash)
        else:  # pragma: no cover - guarded by TrainConfig
            raise ConfigurationError(f"unhandled mode {config.mode}")
    finally:
        log.close()
    return state


def _make_seg_net(config: TrainConfig) -> DualHeadDiscriminator:
    torch.manual_seed(config.seed)
    spec = replace(config.disc_spec, include_source_head=False)
    return DualHeadDiscriminator(spec)


def _run_two_phase(config: TrainConfig, data, out_dir: Path, log: _RunLog, chash: str):
    """Translation phase with the segmentation weight off, then supervised CE.

    ``two_step`` trains phase 2 on real annotated plus synthetic patches;
    ``seg_only_synth`` uses the synthetic patches alone.
    """
    phase1_cfg = replace(config, mode="dasgan", weights=replace(config.weights, lambda_seg=0.0))
    state = init_state(phase1_cfg)
    state = _run_dasgan(state, data, out_dir, log, chash, evaluate=False)

    synth_dir = out_dir / "synthetic"
    synthetic = materialize_synthetic(state.bundle.g_ba, data.train_b, synth_dir)
    pairs = list(synthetic)
    if config.mode == "two_step":
        pairs += _labeled_pairs(data.train_a)

    seg_state = init_state(config, _make_seg_net(config))
    seg_state.iteration = state.iteration
    seg_state = _run_supervised(seg_state, pairs, data.test, out_dir, log, chash)
    return seg_state


def select_model(checkpoints, test_set=None):
    """Checkpoint with the highest test mean F1; ties go to the later iteration."""
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise InvalidArgumentError("no checkpoints to select from")
    scored = []
    for ckpt in checkpoints:
        f1 = ckpt.mean_f1
        if f1 is None:
            if test_set is None:
                raise InvalidArgumentError(
                    f"checkpoint {ckpt.path} has no metrics and no test set was given")
            nets, _ = load_checkpoint(ckpt.path)
            f1 = split_f1(nets["d_a"], test_set)["mean"]
            ckpt = Checkpoint(ckpt.path, ckpt.iteration, f1)
        scored.append(ckpt)
    return max(scored, key=lambda c: (c.mean_f1, c.iteration))
