"""Two-phase training: adversarial GAN training, then the frozen-GAN classifier."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from vital.checkpoint import (Checkpoint, load_module_arrays, module_arrays, save_checkpoint,
                              set_torch_rng_state, torch_rng_state)
from vital.config import RunConfig
from vital.dataset import ImageRecord, stack_pyramids
from vital.errors import ConfigError, NumericalError
from vital.fusion import BranchTransforms, ClassifierHead, combine, combined_dim, fuse_max
from vital.stackgman import GmanModel, _log1m, disc_objective, gen_objective, sample_noise, synthesize
from vital.textenc import TextCNN, Vocabulary, tokenize, vocab_from_records
from vital.vision import Backbone

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
_GAN_PREFIXES = ("F", "G", "D", "textenc")


class RMSProp:
    """``a <- rho a + (1 - rho) g^2``;  ``theta <- theta - lr g / sqrt(a + eps)``."""

    def __init__(self, named_params, lr, rho=0.9, eps=1e-8):
        self.params = dict(named_params)
        self.lr, self.rho, self.eps = lr, rho, eps
        self.acc = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            a = self.acc[name]
            a.mul_(self.rho).addcmul_(p.grad, p.grad, value=1 - self.rho)
            p.sub_(self.lr * p.grad / torch.sqrt(a + self.eps))

    def state_arrays(self, prefix):
        return {f"{prefix}{n}": a.detach().cpu().numpy().copy() for n, a in self.acc.items()}

    def load_state_arrays(self, arrays, prefix):
        for n in self.acc:
            self.acc[n] = torch.from_numpy(arrays[f"{prefix}{n}"].copy()).to(self.acc[n].dtype)


def _seed_from(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0] >> 1)


def record_seed(noise_seed: int, record_id: str) -> int:
    return _seed_from(noise_seed, zlib.crc32(record_id.encode()))


def _seeded_init(seed, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


# =============================================================================
# Phase I


def build_gan(config: RunConfig, vocab_size: int) -> GmanModel:
    model = _seeded_init(_seed_from(config.seeds.init, 1),
                         lambda: GmanModel(config.stage, config.text, vocab_size))
    return model.to(DTYPES[config.dtype])


@dataclass
class Phase1State:
    config: RunConfig
    vocab: Vocabulary
    model: GmanModel
    opt_d: RMSProp
    opt_g: RMSProp
    data_rng: np.random.Generator
    noise_gen: torch.Generator
    iteration: int = 0

    def to_checkpoint(self) -> Checkpoint:
        arrays = module_arrays(self.model)
        arrays.update(self.opt_d.state_arrays("opt.D."))
        arrays.update(self.opt_g.state_arrays("opt.G."))
        arrays["rng.noise"] = torch_rng_state(self.noise_gen)
        meta = {
            "config": self.config.to_dict(),
            "vocab": json.loads(self.vocab.to_json()),
            "iteration": self.iteration,
            "rng": {"data": _jsonable_state(self.data_rng.bit_generator.state)},
        }
        return Checkpoint(phase="phase1", arrays=arrays, meta=meta)


def _jsonable_state(state):
    return json.loads(json.dumps(state))


def init_phase1(records, config: RunConfig, vocab: Vocabulary | None = None) -> Phase1State:
    config.validate()
    if vocab is None:
        vocab = vocab_from_records(records, config.text.max_len)
    model = build_gan(config, len(vocab))
    named_g = [(n, p) for n, p in model.named_parameters() if not n.startswith("D.")]
    named_d = [(n, p) for n, p in model.named_parameters() if n.startswith("D.")]
    return Phase1State(
        config=config, vocab=vocab, model=model,
        opt_d=RMSProp(named_d, config.phase1.lr_D),
        opt_g=RMSProp(named_g, config.phase1.lr_G),
        data_rng=np.random.default_rng([config.seeds.data, 1]),
        noise_gen=torch.Generator().manual_seed(_seed_from(config.seeds.noise, 1)),
    )


def phase1_from_checkpoint(ckpt: Checkpoint, config: RunConfig | None = None) -> Phase1State:
    if ckpt.phase != "phase1":
        raise ConfigError(f"expected a phase1 checkpoint, got {ckpt.phase!r}", field="checkpoint")
    saved = RunConfig.from_dict(ckpt.meta["config"])
    if config is None:
        config = saved
    vocab = Vocabulary.from_json(json.dumps(ckpt.meta["vocab"]))
    state = init_phase1([], config, vocab=vocab)
    load_module_arrays(state.model, {k: v for k, v in ckpt.arrays.items() if k.split(".")[0] in _GAN_PREFIXES})
    state.opt_d.load_state_arrays(ckpt.arrays, "opt.D.")
    state.opt_g.load_state_arrays(ckpt.arrays, "opt.G.")
    set_torch_rng_state(state.noise_gen, ckpt.arrays["rng.noise"])
    state.data_rng.bit_generator.state = ckpt.meta["rng"]["data"]
    state.iteration = int(ckpt.meta["iteration"])
    return state


class _Phase1Data:
    def __init__(self, records, vocab, scales, dtype):
        self.n = len(records)
        self.levels = [torch.from_numpy(a).to(dtype) for a in stack_pyramids(records, scales)]
        n_cap = max(len(r.captions) for r in records)
        ids = np.zeros((self.n, n_cap, vocab.max_len), dtype=np.int64)
        for i, r in enumerate(records):
            for j, cap in enumerate(r.captions):
                ids[i, j] = tokenize(cap, vocab)
        self.ids = torch.from_numpy(ids)
        self.n_caps = np.array([len(r.captions) for r in records])

    def sample(self, rng, batch_size):
        idx = rng.choice(self.n, size=batch_size, replace=self.n < batch_size)
        cap = (rng.random(batch_size) * self.n_caps[idx]).astype(np.int64)
        ids = self.ids[torch.from_numpy(idx), torch.from_numpy(cap)]
        return [lvl[idx] for lvl in self.levels], ids


@dataclass
class Phase1Result:
    checkpoint: Checkpoint
    history: dict = field(default_factory=dict)
    state: Phase1State | None = None


def phase1_step(state: Phase1State, batch):
    """One alternating update: every stage discriminator, then all generators."""
    cfg = state.config
    model = state.model
    reals, ids = batch
    K, B = cfg.stage.K, ids.shape[0]
    dtype = DTYPES[cfg.dtype]

    cond = model.textenc(ids, generator=state.noise_gen)
    z = sample_noise(K, cfg.stage.z_dim, state.noise_gen, batch=B, dtype=dtype)
    fakes = model.generate(cond.c, z)
    # with d_condition == "mu" the head sees the (detached) mean, so G cannot move it to fool D
    c_det = (cond.mu if cfg.phase1.d_condition == "mu" else cond.c).detach()
    c_g = c_det if cfg.phase1.d_condition == "mu" else cond.c

    # discriminator step on the negated stage objectives
    state.opt_d.zero_grad()
    d_losses, g_snapshot, d_real, d_fake = [], [], [], []
    for i in range(cfg.stage.m):
        fake_i = fakes[i].detach()
        imgs = torch.cat([reals[i], fake_i.flatten(0, 1)])
        u, v = model.discriminate(i, imgs, c_det.repeat(K + 1, 1))
        fu, fv = u[B:].view(K, B), v[B:].view(K, B)
        loss_i = -disc_objective(u[:B], v[:B], fu, fv)
        if cfg.phase1.mismatch_weight and B > 1:
            _, v_wrong = model.discriminate(i, reals[i], c_det.roll(1, dims=0))
            loss_i = loss_i - cfg.phase1.mismatch_weight * K * _log1m(v_wrong).mean()
        d_losses.append(loss_i)
        with torch.no_grad():
            # generator loss at the same parameter snapshot as loss_D
            g_snapshot.append(float(gen_objective([(fu, fv)])))
            d_real.append(float(u[:B].mean()))
            d_fake.append(float(fu.mean()))
    loss_d = torch.stack(d_losses).sum()
    loss_d.backward()
    state.opt_d.step()

    # generator step (text encoder and conditioning trained jointly)
    state.opt_g.zero_grad()
    d_params = model.discriminator_parameters()
    for p in d_params:
        p.requires_grad_(False)
    scores = []
    for i in range(cfg.stage.m):
        u, v = model.discriminate(i, fakes[i].flatten(0, 1), c_g.repeat(K, 1))
        scores.append((u.view(K, B), v.view(K, B)))
    kl = cond.kl.mean()
    loss_g = gen_objective(scores, cond.kl, cfg.phase1.lambda_kl)
    loss_g.backward()
    for p in d_params:
        p.requires_grad_(True)
    state.opt_g.step()

    stats = {
        "loss_D": [float(x.detach()) for x in d_losses],
        "loss_G": g_snapshot,
        "loss_G_step": float(loss_g.detach()),
        "kl": float(kl.detach()),
        "d_real": d_real,
        "d_fake": d_fake,
    }
    if not all(math.isfinite(x) for x in stats["loss_D"] + stats["loss_G"] + [stats["kl"], stats["loss_G_step"]]):
        raise NumericalError(
            f"non-finite loss at iteration {state.iteration}",
            diagnostics={
                "iteration": state.iteration, **stats,
                "real_mean": [float(r.mean()) for r in reals],
                "real_std": [float(r.std()) for r in reals],
                "c_mean": float(cond.c.detach().mean()), "c_std": float(cond.c.detach().std()),
            })
    return stats


def train_phase1(records: list[ImageRecord], config: RunConfig, *, resume: Checkpoint | None = None,
                 log_path=None, checkpoint_dir=None, dump_path=None) -> Phase1Result:
    """Train the GAN for ``config.phase1.iterations`` total iterations.

    Appends one JSON line to ``log_path`` every ``log_every`` iterations.
    With ``resume`` the run continues from the stored iteration and rng state.
    """
    if not records:
        raise ConfigError("empty dataset", field="data")
    state = phase1_from_checkpoint(resume, config) if resume is not None else init_phase1(records, config)
    cfg = state.config
    dtype = DTYPES[cfg.dtype]
    data = _Phase1Data(records, state.vocab, cfg.stage.scales, dtype)
    history = {"iter": [], "loss_D": [], "loss_G": [], "kl": [], "d_real": [], "d_fake": []}
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while state.iteration < cfg.phase1.iterations:
            batch = data.sample(state.data_rng, cfg.phase1.batch_size)
            try:
                stats = phase1_step(state, batch)
            except NumericalError as exc:
                if dump_path:
                    Path(dump_path).write_text(json.dumps(exc.diagnostics, indent=1, sort_keys=True))
                raise
            it = state.iteration
            history["iter"].append(it)
            for key in ("loss_D", "loss_G", "d_real", "d_fake"):
                history[key].append(stats[key])
            history["kl"].append(stats["kl"])
            if it % cfg.phase1.log_every == 0:
                line = {"iter": it, "stage": list(range(cfg.stage.m)), "time": time.time(), **stats}
                log.info("phase1 iter %d loss_D %s loss_G %s", it,
                         [round(x, 4) for x in stats["loss_D"]], [round(x, 4) for x in stats["loss_G"]])
                if log_fh:
                    log_fh.write(json.dumps(line, sort_keys=True) + "\n")
            state.iteration += 1
            interval = cfg.phase1.checkpoint_interval
            if checkpoint_dir and interval and state.iteration % interval == 0 and state.iteration < cfg.phase1.iterations:
                save_checkpoint(state.to_checkpoint(), Path(checkpoint_dir) / f"phase1_iter{state.iteration:07d}.ckpt")
    finally:
        if log_fh:
            log_fh.close()
    return Phase1Result(state.to_checkpoint(), history, state)


def load_gan(ckpt: Checkpoint) -> tuple[GmanModel, Vocabulary, RunConfig]:
    """Rebuild the generator stack stored in a phase1 or phase2 checkpoint."""
    if ckpt.phase == "phase1":
        cfg = RunConfig.from_dict(ckpt.meta["config"])
    else:
        cfg = RunConfig.from_dict(ckpt.meta["gan_config"])
    vocab = Vocabulary.from_json(json.dumps(ckpt.meta["vocab"]))
    model = GmanModel(cfg.stage, cfg.text, len(vocab)).to(DTYPES[cfg.dtype])
    load_module_arrays(model, {k: v for k, v in ckpt.arrays.items() if k.split(".")[0] in _GAN_PREFIXES})
    model.eval()
    return model, vocab, cfg


def gan_fingerprint(ckpt: Checkpoint) -> str:
    h = hashlib.sha256()
    for name in sorted(ckpt.arrays):
        if name.split(".")[0] in ("F", "G", "textenc"):
            h.update(name.encode())
            h.update(ckpt.arrays[name].tobytes())
    return h.hexdigest()[:16]


# =============================================================================
# Phase II


class SyntheticCache:
    """Per-record synthetic images, generated once with a per-record seed.

    Kept in memory; also mirrored to ``$VITAL_CACHE_DIR`` when that is set.
    """

    def __init__(self, model: GmanModel, vocab: Vocabulary, noise_seed: int, fingerprint: str, cache_dir=None):
        self.model, self.vocab = model, vocab
        self.noise_seed = noise_seed
        self.fingerprint = fingerprint
        cache_dir = cache_dir if cache_dir is not None else os.environ.get("VITAL_CACHE_DIR")
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.memory: dict[tuple[str, int], np.ndarray] = {}

    def _path(self, record_id, K):
        return self.cache_dir / f"{self.fingerprint}_{self.noise_seed}_{record_id}_K{K}.npy"

    def get(self, rec: ImageRecord, K: int) -> np.ndarray:
        key = (rec.record_id, K)
        if key in self.memory:
            return self.memory[key]
        arr = None
        if self.cache_dir is not None and self._path(*key).is_file():
            try:
                arr = np.load(self._path(*key))
            except (OSError, ValueError):
                arr = None
        if arr is None:
            seed = record_seed(self.noise_seed, rec.record_id)
            arr = synthesize(rec.captions[0], K, self.model, self.vocab, seed=seed).numpy()
            if self.cache_dir is not None:
                self.cache_dir.mkdir(parents=True, exist_ok=True)
                np.save(self._path(*key), arr)
        self.memory[key] = arr
        return arr


@dataclass
class ClassifierData:
    real: torch.Tensor  # N x 3 x s x s
    companions: torch.Tensor  # N x K x 3 x s x s (synthetic images, or retrieved neighbours)
    ids: torch.Tensor  # N x n_cap x L
    n_caps: np.ndarray
    labels: torch.Tensor

    def __len__(self):
        return self.real.shape[0]


def build_classifier_data(records, companions: np.ndarray, vocab: Vocabulary, dtype) -> ClassifierData:
    n_cap = max(len(r.captions) for r in records)
    ids = np.zeros((len(records), n_cap, vocab.max_len), dtype=np.int64)
    for i, r in enumerate(records):
        for j, cap in enumerate(r.captions):
            ids[i, j] = tokenize(cap, vocab)
    real = np.stack([r.image.transpose(2, 0, 1) for r in records])
    return ClassifierData(
        real=torch.from_numpy(real).to(dtype),
        companions=torch.from_numpy(np.asarray(companions)).to(dtype),
        ids=torch.from_numpy(ids),
        n_caps=np.array([len(r.captions) for r in records]),
        labels=torch.tensor([r.label for r in records], dtype=torch.long),
    )


def synthetic_companions(records, cache: SyntheticCache, K: int) -> np.ndarray:
    return np.stack([cache.get(r, K) for r in records])


@dataclass
class FeatureBundle:
    v_x: torch.Tensor | None
    v_sk: torch.Tensor | None  # B x K x h
    v_s: torch.Tensor | None
    v_t: torch.Tensor | None


class VitalClassifier(nn.Module):
    def __init__(self, config: RunConfig, vocab_size: int, num_classes: int, mode: str, K: int):
        super().__init__()
        self.mode = mode
        self.K = K
        v, t = config.vision, config.text
        size = config.stage.scales[-1]
        self.backbone = Backbone(size, v.widths, v.d)
        self.synth_backbone = None if v.share_backbone else Backbone(size, v.widths, v.d)
        self.fusion = BranchTransforms(K, v.d, config.fusion.h)
        self.textcnn = TextCNN(vocab_size, num_classes, t.embed_dim, t.cnn_channels, t.kernel_sizes,
                               t.t_dim, t.max_len)
        self.head = nn.ModuleDict({mode: ClassifierHead(combined_dim(mode, v.d, config.fusion.h, t.t_dim),
                                                        num_classes)})

    def features(self, real, companions, ids) -> FeatureBundle:
        B, K = companions.shape[:2]
        synth_bb = self.synth_backbone or self.backbone
        phis = synth_bb(companions.flatten(0, 1)).pooled.view(B, K, -1)
        v_sk = self.fusion(phis)
        v_x = self.backbone(real).pooled if self.mode in ("RS", "RST") else None
        v_t = self.textcnn(ids)[0] if self.mode == "RST" else None
        return FeatureBundle(v_x=v_x, v_sk=v_sk, v_s=fuse_max(v_sk), v_t=v_t)

    def forward(self, real, companions, ids):
        b = self.features(real, companions, ids)
        return self.head[self.mode](combine(b.v_x, b.v_s, b.v_t, self.mode))

    def trainable(self, freeze_backbone=False):
        for name, p in self.named_parameters():
            top = name.split(".")[0]
            if freeze_backbone and top in ("backbone", "synth_backbone"):
                continue
            if top == "textcnn" and self.mode != "RST":
                continue
            if top == "synth_backbone" and self.synth_backbone is None:
                continue
            yield name, p


def build_classifier(config: RunConfig, vocab_size, num_classes, mode, K) -> VitalClassifier:
    model = _seeded_init(_seed_from(config.seeds.init, 2),
                         lambda: VitalClassifier(config, vocab_size, num_classes, mode, K))
    return model.to(DTYPES[config.dtype])


@torch.no_grad()
def predict(model: VitalClassifier, data: ClassifierData, batch_size=64) -> np.ndarray:
    model.eval()
    out = []
    for s in range(0, len(data), batch_size):
        sl = slice(s, s + batch_size)
        logits = model(data.real[sl], data.companions[sl], data.ids[sl, 0])
        out.append(logits.argmax(-1).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _accuracy(model, data):
    if len(data) == 0:
        return float("nan")
    return float((predict(model, data) == data.labels.numpy()).mean())


def fit_classifier(model: VitalClassifier, train: ClassifierData, test: ClassifierData | None,
                   config: RunConfig, rng: np.random.Generator):
    """RMSProp with a fixed learning rate; returns the per-epoch accuracy trace."""
    p2 = config.phase2
    opt = RMSProp(list(model.trainable(p2.freeze_backbone)), p2.lr)
    trace = []
    n = len(train)
    for epoch in range(p2.epochs):
        model.train()
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, p2.batch_size):
            idx = torch.from_numpy(order[s: s + p2.batch_size])
            cap = torch.from_numpy((rng.random(len(idx)) * train.n_caps[idx.numpy()]).astype(np.int64))
            logits = model(train.real[idx], train.companions[idx], train.ids[idx, cap])
            loss = nn.functional.cross_entropy(logits, train.labels[idx])
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite classifier loss at epoch {epoch}",
                                     diagnostics={"epoch": epoch, "batch_start": s})
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "train_acc": _accuracy(model, train),
               "test_acc": _accuracy(model, test) if test is not None else float("nan")}
        log.info("phase2 epoch %d loss %.4f train %.3f test %.3f", epoch, row["loss"], row["train_acc"], row["test_acc"])
        trace.append(row)
    return trace, opt


@dataclass
class Phase2Result:
    checkpoint: Checkpoint
    trace: list[dict]
    model: VitalClassifier
    train_data: ClassifierData
    test_data: ClassifierData | None


def train_phase2(train_records, gan_ckpt: Checkpoint, config: RunConfig, test_records=None,
                 mode: str | None = None, K: int | None = None, cache: SyntheticCache | None = None) -> Phase2Result:
    """Train backbone, fusion, text CNN and head on frozen-GAN synthetic images."""
    mode = mode or config.phase2.mode
    K = K or config.phase2.K_synth
    config = config.replace(**{"phase2.mode": mode, "phase2.K_synth": K})
    gan, vocab, gan_cfg = load_gan(gan_ckpt)
    if not gan_cfg.stage.tied_weights and K > gan_cfg.stage.K:
        raise ConfigError(f"K_synth={K} exceeds the untied GAN's {gan_cfg.stage.K} branches", field="phase2.K_synth")
    if gan_cfg.stage.scales != config.stage.scales:
        raise ConfigError("classifier scales differ from the GAN's", field="stage.scales")
    dtype = DTYPES[config.dtype]
    gan = gan.to(dtype)
    if cache is None:
        cache = SyntheticCache(gan, vocab, config.seeds.noise, gan_fingerprint(gan_ckpt))
    num_classes = 1 + max(r.label for r in list(train_records) + list(test_records or []))
    train = build_classifier_data(train_records, synthetic_companions(train_records, cache, K), vocab, dtype)
    test = None
    if test_records:
        test = build_classifier_data(test_records, synthetic_companions(test_records, cache, K), vocab, dtype)
    model = build_classifier(config, len(vocab), num_classes, mode, K)
    rng = np.random.default_rng([config.seeds.data, 2])
    trace, opt = fit_classifier(model, train, test, config, rng)

    arrays = {k: v for k, v in gan_ckpt.arrays.items() if k.split(".")[0] in _GAN_PREFIXES}
    arrays.update(module_arrays(model))
    arrays.update(opt.state_arrays("opt.clf."))
    meta = {
        "config": config.to_dict(),
        "gan_config": gan_cfg.to_dict(),
        "vocab": gan_ckpt.meta["vocab"],
        "num_classes": num_classes,
        "mode": mode,
        "K": K,
        "epoch": config.phase2.epochs,
        "trace": trace,
        "rng": {"data": _jsonable_state(rng.bit_generator.state)},
    }
    return Phase2Result(Checkpoint(phase="phase2", arrays=arrays, meta=meta), trace, model, train, test)


def load_classifier(ckpt: Checkpoint) -> tuple[VitalClassifier, RunConfig]:
    if ckpt.phase != "phase2":
        raise ConfigError(f"expected a phase2 checkpoint, got {ckpt.phase!r}", field="checkpoint")
    cfg = RunConfig.from_dict(ckpt.meta["config"])
    vocab_size = len(ckpt.meta["vocab"]["tokens"])
    model = VitalClassifier(cfg, vocab_size, ckpt.meta["num_classes"], ckpt.meta["mode"], ckpt.meta["K"])
    model = model.to(DTYPES[cfg.dtype])
    prefixes = ("backbone", "synth_backbone", "fusion", "textcnn", "head")
    load_module_arrays(model, {k: v for k, v in ckpt.arrays.items() if k.split(".")[0] in prefixes})
    model.eval()
    return model, cfg
