"""Caption tokenization, the 3-kernel text CNN, and the conditioning encoder."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from vital.dataset import words

PAD = 0
UNK = 1


class Vocabulary:
    def __init__(self, tokens, max_len=16, counts=None):
        self.itos = ["<pad>", "<unk>"] + [t for t in tokens if t not in ("<pad>", "<unk>")]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.max_len = int(max_len)
        self.counts = dict(counts or {})

    def __len__(self):
        return len(self.itos)

    @classmethod
    def build(cls, captions, max_len=16, min_count=1):
        counts = Counter(w for cap in captions for w in words(cap))
        tokens = sorted((t for t, n in counts.items() if n >= min_count), key=lambda t: (-counts[t], t))
        return cls(tokens, max_len=max_len, counts=counts)

    def to_json(self) -> str:
        rows = [{"token": t, "id": i, "count": self.counts.get(t, 0)} for i, t in enumerate(self.itos)]
        return json.dumps({"max_len": self.max_len, "tokens": rows}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        d = json.loads(text)
        rows = sorted(d["tokens"], key=lambda r: r["id"])
        return cls([r["token"] for r in rows[2:]], max_len=d["max_len"],
                   counts={r["token"]: r["count"] for r in rows[2:]})


def tokenize(caption: str, vocab: Vocabulary) -> list[int]:
    ids = [vocab.stoi.get(w, UNK) for w in words(caption)][: vocab.max_len]
    return ids + [PAD] * (vocab.max_len - len(ids))


def tokenize_batch(captions, vocab: Vocabulary) -> torch.Tensor:
    return torch.tensor([tokenize(c, vocab) for c in captions], dtype=torch.long)


def _check_ids(ids: torch.Tensor, vocab_size: int):
    if ids.numel() and (int(ids.max()) >= vocab_size or int(ids.min()) < 0):
        raise ValueError(f"token id out of range for vocabulary of size {vocab_size}")


class TextCNN(nn.Module):
    """Kim-style multichannel text CNN.

    Token embedding -> parallel Conv1d (one per kernel size) -> ReLU ->
    max over time -> concat -> dense (``v_t``, ReLU) -> dense (class logits).
    Inputs shorter than ``max_len`` are right-padded, so trailing pads never
    change the output.
    """

    def __init__(self, vocab_size, num_classes, embed_dim=32, channels=16,
                 kernel_sizes=(3, 4, 5), t_dim=64, max_len=16):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.embedding = nn.Embedding(vocab_size, embed_dim, padding_idx=PAD)
        self.convs = nn.ModuleList(nn.Conv1d(embed_dim, channels, k) for k in kernel_sizes)
        self.feature = nn.Linear(channels * len(kernel_sizes), t_dim)
        self.logits = nn.Linear(t_dim, num_classes)

    def pooled(self, ids):
        _check_ids(ids, self.vocab_size)
        if ids.shape[1] < self.max_len:
            ids = F.pad(ids, (0, self.max_len - ids.shape[1]), value=PAD)
        x = self.embedding(ids).transpose(1, 2)  # B x E x L
        return torch.cat([F.relu(conv(x)).amax(dim=2) for conv in self.convs], dim=1)

    def forward(self, ids):
        """Return ``(v_t, class_logits)``."""
        v_t = F.relu(self.feature(self.pooled(ids)))
        return v_t, self.logits(v_t)


@dataclass
class ConditioningOutput:
    c: torch.Tensor
    mu: torch.Tensor
    log_sigma: torch.Tensor
    kl: torch.Tensor  # per sample, shape (B,)
    eps: torch.Tensor


def kl_standard_normal(mu, log_sigma):
    """KL( N(mu, diag(exp(log_sigma))^2) || N(0, I) ), summed over the last axis."""
    return 0.5 * (mu.pow(2) + torch.exp(2 * log_sigma) - 1 - 2 * log_sigma).sum(dim=-1)


class TextEncoder(nn.Module):
    """Caption -> text embedding -> conditioning vector (Gaussian reparameterization)."""

    def __init__(self, vocab_size, embed_dim=32, e_dim=32, c_dim=16, init_log_sigma=0.0,
                 mu_init_gain=1.0):
        super().__init__()
        self.vocab_size = vocab_size
        self.embedding = nn.Embedding(vocab_size, embed_dim, padding_idx=PAD)
        self.proj = nn.Linear(embed_dim, e_dim)
        self.mu = nn.Linear(e_dim, c_dim)
        self.log_sigma = nn.Linear(e_dim, c_dim)
        nn.init.constant_(self.log_sigma.bias, init_log_sigma)
        with torch.no_grad():
            self.mu.weight.mul_(mu_init_gain)
            self.mu.bias.mul_(mu_init_gain)
        self.c_dim = c_dim

    def embed_text(self, ids):
        _check_ids(ids, self.vocab_size)
        mask = (ids != PAD).unsqueeze(-1).to(self.embedding.weight.dtype)
        summed = (self.embedding(ids) * mask).sum(dim=1)
        mean = summed / mask.sum(dim=1).clamp(min=1.0)
        return F.relu(self.proj(mean))

    def condition(self, phi, generator=None, eps=None) -> ConditioningOutput:
        if not torch.isfinite(phi).all():
            raise ValueError("text embedding contains non-finite values")
        mu = self.mu(phi)
        log_sigma = self.log_sigma(phi)
        if eps is None:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        c = mu + torch.exp(log_sigma) * eps
        return ConditioningOutput(c=c, mu=mu, log_sigma=log_sigma,
                                  kl=kl_standard_normal(mu, log_sigma), eps=eps)

    def forward(self, ids, generator=None, eps=None):
        return self.condition(self.embed_text(ids), generator=generator, eps=eps)


def vocab_from_records(records, max_len) -> Vocabulary:
    return Vocabulary.build([c for r in records for c in r.captions], max_len=max_len)


def caption_ids(records, vocab, rng: np.random.Generator | None = None) -> torch.Tensor:
    """Token ids for one caption per record (random when ``rng`` given, else the first)."""
    caps = []
    for r in records:
        j = 0 if rng is None else int(rng.integers(len(r.captions)))
        caps.append(r.captions[j])
    return tokenize_batch(caps, vocab)
