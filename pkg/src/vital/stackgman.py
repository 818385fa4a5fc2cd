"""K-branch, m-stage text-conditioned GAN with one discriminator per stage.

Stages are indexed ``0..m-1`` and stage ``i`` works at ``scales[i]``.  Every
stage has a trunk ``F.i`` producing hidden features and an image head ``G.i``.
In tied mode (the default) one trunk/head per stage is shared by all K
branches, so branches differ only through their noise vectors.  In untied
mode each stage holds K independent copies, addressed as ``F.i.k``/``G.i.k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from vital.config import StageConfig, TextConfig
from vital.textenc import TextEncoder, Vocabulary, tokenize_batch

PROB_EPS = 1e-7


def _lrelu(x):
    return F.leaky_relu(x, 0.2)


def _pixel_norm(x):
    return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


def _broadcast(c, size):
    return c[:, :, None, None].expand(-1, -1, size, size)


class InitStage(nn.Module):
    """``h_0 = F_0(c, z)``: dense projection to the coarsest grid plus one conv."""

    def __init__(self, c_dim, z_dim, g_ch, scale):
        super().__init__()
        self.scale = scale
        self.g_ch = g_ch
        self.fc = nn.Linear(c_dim + z_dim, g_ch * scale * scale)
        self.conv = nn.Conv2d(g_ch, g_ch, 3, padding=1)

    def forward(self, c, z):
        h = self.fc(torch.cat([c, z], dim=1)).view(-1, self.g_ch, self.scale, self.scale)
        h = _pixel_norm(_lrelu(h))
        return _pixel_norm(_lrelu(self.conv(h)))


class UpStage(nn.Module):
    """``h_i = F_i(h_{i-1}, c)``: 2x nearest upsampling, concat c, two convs."""

    def __init__(self, c_dim, g_ch):
        super().__init__()
        self.conv1 = nn.Conv2d(g_ch + c_dim, g_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(g_ch, g_ch, 3, padding=1)

    def forward(self, h, c):
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = torch.cat([h, _broadcast(c, h.shape[-1])], dim=1)
        h = _pixel_norm(_lrelu(self.conv1(h)))
        return _pixel_norm(_lrelu(self.conv2(h)))


class ImageHead(nn.Module):
    def __init__(self, g_ch):
        super().__init__()
        self.conv = nn.Conv2d(g_ch, 3, 3, padding=1)

    def forward(self, h):
        return torch.tanh(self.conv(h))


class StageDiscriminator(nn.Module):
    """Strided conv trunk down to 4x4, then unconditional and conditional logits."""

    def __init__(self, scale, c_dim, d_ch, zero_heads=True):
        super().__init__()
        self.scale = scale
        layers, ch_in, ch, size = [], 3, d_ch, scale
        while size > 4:
            layers += [nn.Conv2d(ch_in, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch_in, ch, size = ch, min(ch * 2, 8 * d_ch), size // 2
        if not layers:
            layers = [nn.Conv2d(3, d_ch, 3, padding=1), nn.LeakyReLU(0.2)]
            ch_in = d_ch
        self.trunk = nn.Sequential(*layers)
        self.uncond = nn.Linear(ch_in * 16, 1)
        self.joint = nn.Conv2d(ch_in + c_dim, ch_in, 3, padding=1)
        self.cond = nn.Linear(ch_in * 16, 1)
        if zero_heads:
            for lin in (self.uncond, self.cond):
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)

    def logits(self, images, c):
        if images.shape[-1] != self.scale or images.shape[-2] != self.scale:
            raise ValueError(f"discriminator expects {self.scale}x{self.scale} images, got {tuple(images.shape[-2:])}")
        feat = self.trunk(images)
        u = self.uncond(feat.flatten(1)).squeeze(1)
        j = _lrelu(self.joint(torch.cat([feat, _broadcast(c, feat.shape[-1])], dim=1)))
        return u, self.cond(j.flatten(1)).squeeze(1)

    def forward(self, images, c):
        u, v = self.logits(images, c)
        return torch.sigmoid(u), torch.sigmoid(v)


@dataclass
class GeneratorState:
    hidden: list[torch.Tensor]
    images: list[torch.Tensor]


class GmanModel(nn.Module):
    def __init__(self, stage: StageConfig, text: TextConfig, vocab_size: int, zero_heads=True):
        super().__init__()
        stage.validate()
        self.stage = stage
        self.c_dim = text.c_dim
        self.textenc = TextEncoder(vocab_size, text.embed_dim, text.e_dim, text.c_dim,
                                   text.init_log_sigma, text.mu_init_gain)
        copies = 1 if stage.tied_weights else stage.K

        def trunk(i):
            if i == 0:
                return InitStage(text.c_dim, stage.z_dim, stage.g_ch, stage.scales[0])
            return UpStage(text.c_dim, stage.g_ch)

        def maybe_branches(make):
            if stage.tied_weights:
                return make()
            return nn.ModuleList(make() for _ in range(copies))

        self.F = nn.ModuleList(maybe_branches(lambda i=i: trunk(i)) for i in range(stage.m))
        self.G = nn.ModuleList(maybe_branches(lambda: ImageHead(stage.g_ch)) for _ in range(stage.m))
        self.D = nn.ModuleList(StageDiscriminator(s, text.c_dim, stage.d_ch, zero_heads) for s in stage.scales)

    # -- parameter groups ---------------------------------------------------
    def generator_parameters(self):
        return list(self.F.parameters()) + list(self.G.parameters())

    def discriminator_parameters(self):
        return list(self.D.parameters())

    def generator_parameter_count(self):
        return sum(p.numel() for p in self.generator_parameters())

    def _module(self, modules, i, k):
        if self.stage.tied_weights:
            return modules[i]
        if k >= self.stage.K:
            raise ValueError(f"branch {k} out of range for untied model with K={self.stage.K}")
        return modules[i][k]

    # -- generation -----------------------------------------------------------
    def generator_forward(self, c, z, k=0) -> GeneratorState:
        """Run branch ``k`` for a batch: ``c`` is (B, c_dim), ``z`` is (B, z_dim)."""
        if c.shape[0] != z.shape[0] or c.shape[1] != self.c_dim or z.shape[1] != self.stage.z_dim:
            raise ValueError(f"shape mismatch: c {tuple(c.shape)}, z {tuple(z.shape)}")
        hidden, images = [], []
        h = None
        for i in range(self.stage.m):
            trunk = self._module(self.F, i, k)
            h = trunk(c, z) if i == 0 else trunk(h, c)
            hidden.append(h)
            images.append(self._module(self.G, i, k)(h))
        return GeneratorState(hidden, images)

    def generate(self, c, z):
        """All branches at once.  ``z`` is (K, B, z_dim); returns per-stage (K, B, 3, s, s)."""
        K, B = z.shape[:2]
        if self.stage.tied_weights:
            state = self.generator_forward(c.repeat(K, 1), z.reshape(K * B, -1))
            return [im.view(K, B, *im.shape[1:]) for im in state.images]
        per_branch = [self.generator_forward(c, z[k], k).images for k in range(K)]
        return [torch.stack([imgs[i] for imgs in per_branch]) for i in range(self.stage.m)]

    def discriminate(self, i, images, c):
        return self.D[i](images, c)

    def check_finite(self):
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise ValueError(f"parameter {name} is not finite")


def sample_noise(K, z_dim, generator=None, batch=None, dtype=torch.float32):
    """K standard-normal noise vectors, drawn branch by branch so prefixes are stable."""
    if K < 1:
        raise ValueError("K must be >= 1")
    shape = (z_dim,) if batch is None else (batch, z_dim)
    return torch.stack([torch.randn(shape, generator=generator, dtype=dtype) for _ in range(K)])


def _log(p):
    return torch.log(p.clamp(PROB_EPS, 1 - PROB_EPS))


def _log1m(p):
    return torch.log(1 - p.clamp(PROB_EPS, 1 - PROB_EPS))


def disc_objective(real_uncond, real_cond, fake_uncond, fake_cond):
    """Stage discriminator objective (to be maximized).

    ``real_*`` are (B,) probabilities on real images; ``fake_*`` are (K, B)
    probabilities on the K branches' images.
    """
    if real_uncond.numel() == 0 or fake_uncond.numel() == 0:
        raise ValueError("empty batch")
    K = fake_uncond.shape[0]
    return (K * _log(real_uncond).mean() + _log1m(fake_uncond).mean(dim=1).sum()
            + K * _log(real_cond).mean() + _log1m(fake_cond).mean(dim=1).sum())


def gen_objective(fake_scores, kl=None, lambda_kl=1.0):
    """Generator objective summed over stages (minimized).

    ``fake_scores`` is a list over stages of ``(uncond, cond)`` pairs, each (K, B).
    ``kl`` is the per-sample conditioning KL, averaged over the batch.
    """
    if not fake_scores:
        raise ValueError("no stages")
    total = 0.0
    for uncond, cond in fake_scores:
        if uncond.numel() == 0:
            raise ValueError("empty batch")
        total = total - _log(uncond).mean(dim=1).sum() - _log(cond).mean(dim=1).sum()
    if kl is not None and lambda_kl:
        total = total + lambda_kl * kl.mean()
    return total


@torch.no_grad()
def synthesize(caption, K, model: GmanModel, vocab: Vocabulary, generator=None, seed=None):
    """K finest-scale images (K, 3, s, s) for one caption.

    Draws the conditioning noise first, then one noise vector per branch, so
    the first K' images for K' < K are identical to a K'-image call.
    """
    model.check_finite()
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    dtype = next(model.parameters()).dtype
    ids = tokenize_batch([caption], vocab)
    phi = model.textenc.embed_text(ids)
    eps = torch.randn((1, model.c_dim), generator=generator, dtype=dtype)
    c = model.textenc.condition(phi, eps=eps).c
    z = sample_noise(K, model.stage.z_dim, generator, batch=1, dtype=dtype)
    return model.generate(c, z)[-1][:, 0]
