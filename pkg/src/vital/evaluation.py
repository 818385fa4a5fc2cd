"""Metrics, correlation analysis, the tag-neighbour baseline, and ablations."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import stats as sps
from torch import nn

from vital import _kernels
from vital.config import RunConfig, validate_against_schema
from vital.checkpoint import Checkpoint
from vital.train import (DTYPES, SyntheticCache, _seed_from, _seeded_init, build_classifier,
                         build_classifier_data, fit_classifier, gan_fingerprint, load_gan, predict,
                         record_seed, synthetic_companions, train_phase1, train_phase2)
from vital.stackgman import synthesize
from vital.vision import Backbone


class DegenerateInputWarning(UserWarning):
    """A metric hit a 0/0 case and returned its conventional value."""


# -----------------------------------------------------------------------------
# scalar metrics

def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    return float((predictions == labels).mean())


def hamming(f1, f2, thresholds) -> float:
    """Fraction of dimensions whose thresholded bits disagree."""
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape or f1.shape[-1] != np.shape(thresholds)[-1]:
        raise ValueError(f"dimension mismatch: {f1.shape}, {f2.shape}, {np.shape(thresholds)}")
    return float(_kernels.hamming_rows(f1.reshape(1, -1), f2.reshape(1, -1), thresholds)[0])


def cosine(f1, f2) -> float:
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape:
        raise ValueError(f"dimension mismatch: {f1.shape} vs {f2.shape}")
    n1, n2 = np.linalg.norm(f1), np.linalg.norm(f2)
    if n1 == 0 or n2 == 0:
        warnings.warn("cosine with a zero vector; returning 0.0", DegenerateInputWarning, stacklevel=2)
        return 0.0
    return float(np.clip(f1 @ f2 / (n1 * n2), -1.0, 1.0))


def jaccard(tags_a, tags_b) -> float:
    a, b = set(tags_a), set(tags_b)
    if not a and not b:
        warnings.warn("Jaccard of two empty tag sets; returning 1.0", DegenerateInputWarning, stacklevel=2)
        return 1.0
    return len(a & b) / len(a | b)


def diversity(images, backbone: Backbone) -> float:
    """Mean pairwise Euclidean distance between pooled backbone features of K images."""
    images = torch.as_tensor(images)
    if images.shape[0] < 2:
        raise ValueError("diversity needs K >= 2 images")
    with torch.no_grad():
        feats = backbone(images.to(next(backbone.parameters()).dtype)).pooled.double().numpy()
    return _kernels.mean_pairwise_l2(feats)


# -----------------------------------------------------------------------------
# reports

@dataclass
class MetricReport:
    kind: str
    rows: list[dict]
    metrics: dict
    config_fingerprint: str = ""
    notes: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        out = {"kind": self.kind, "config_fingerprint": self.config_fingerprint,
               "n_rows": len(self.rows), "metrics": self.metrics}
        if self.notes:
            out["notes"] = list(self.notes)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.rows:
            fields = list(self.rows[0])
            writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _fmt(v) for k, v in row.items()})
        return buf.getvalue()

    def write(self, report_dir, plots=False) -> list[Path]:
        out = Path(report_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary = _jsonable(self.summary())
        validate_against_schema(summary, "summary")
        paths = [out / f"{self.kind}.csv", out / f"{self.kind}_summary.json"]
        paths[0].write_text(self.to_csv(), encoding="utf-8")
        paths[1].write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        if plots:
            paths += _plot(self, out)
        return paths


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 10))
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if not np.isfinite(v) else round(v, 10)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _plot(report: MetricReport, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = out / f"{report.kind}.png"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if report.kind == "correlation":
        ax.hist([r["hamming"] for r in report.rows], bins=20, alpha=0.6, label="hamming")
        ax.hist([r["cosine"] for r in report.rows], bins=20, alpha=0.6, label="cosine")
        ax.legend()
    elif report.kind in ("k-sweep", "jcnn"):
        key = "K" if report.kind == "k-sweep" else "K_nn"
        groups = {}
        for r in report.rows:
            groups.setdefault(r.get("mode", "RS"), {}).setdefault(r[key], []).append(r["accuracy"])
        for mode, cells in groups.items():
            ks = sorted(cells)
            ax.plot(ks, [np.mean(cells[k]) for k in ks], marker="o", label=mode)
        ax.set_xlabel(key)
        ax.set_ylabel("accuracy")
        ax.legend()
    else:
        plt.close(fig)
        return []
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return [path]


# -----------------------------------------------------------------------------
# features

@torch.no_grad()
def pooled_features(backbone: Backbone, images, batch_size=128) -> np.ndarray:
    images = torch.as_tensor(images)
    dtype = next(backbone.parameters()).dtype
    out = [backbone(images[s: s + batch_size].to(dtype)).pooled.double().numpy()
           for s in range(0, images.shape[0], batch_size)]
    return np.concatenate(out)


def _real_images(records) -> np.ndarray:
    return np.stack([r.image.transpose(2, 0, 1) for r in records]).astype(np.float32)


def median_thresholds(backbone: Backbone, train_records) -> np.ndarray:
    return np.median(pooled_features(backbone, _real_images(train_records)), axis=0)


def correlation_report(gan_ckpt: Checkpoint, backbone: Backbone, train_records, records, K,
                       noise_seed=0, synthetic_override=None, fingerprint="") -> MetricReport:
    """Compare each record's K synthetic images with its real image in backbone feature space.

    ``synthetic_override`` (N x K x 3 x s x s) replaces the synthetic images; tests
    use it to inject the real images themselves.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if synthetic_override is None:
        gan, vocab, _ = load_gan(gan_ckpt)
        cache = SyntheticCache(gan, vocab, noise_seed, gan_fingerprint(gan_ckpt))
        synth = synthetic_companions(records, cache, K)
    else:
        synth = np.asarray(synthetic_override)
    thresholds = median_thresholds(backbone, train_records)
    real_f = pooled_features(backbone, _real_images(records))
    n = len(records)
    syn_f = pooled_features(backbone, synth.reshape(n * K, *synth.shape[2:])).reshape(n, K, -1)
    ham = _kernels.hamming_rows(syn_f.reshape(n * K, -1), np.repeat(real_f, K, axis=0), thresholds).reshape(n, K)

    def _cos_matrix(a, b):
        na = np.linalg.norm(a, axis=-1, keepdims=True)
        nb = np.linalg.norm(b, axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            m = (a / np.where(na == 0, 1, na)) @ (b / np.where(nb == 0, 1, nb)).T
        return np.clip(m, -1, 1)

    rows = []
    for i, rec in enumerate(records):
        for k in range(K):
            rows.append({"record_id": rec.record_id, "label": rec.label, "k": k,
                         "hamming": float(ham[i, k]), "cosine": cosine(syn_f[i, k], real_f[i])})
    labels = np.array([r.label for r in records])
    cross = _cos_matrix(syn_f.reshape(n * K, -1), real_f).reshape(n, K, n)
    same = labels[:, None] == labels[None, :]
    not_self = ~np.eye(n, dtype=bool)
    matched = cross[np.broadcast_to((same & not_self)[:, None, :], cross.shape)]
    mismatched = cross[np.broadcast_to((~same)[:, None, :], cross.shape)]
    metrics = {
        "n": n, "K": K,
        "hamming_min": float(ham.min()), "hamming_mean": float(ham.mean()), "hamming_max": float(ham.max()),
        "cosine_min": float(min(r["cosine"] for r in rows)),
        "cosine_mean": float(np.mean([r["cosine"] for r in rows])),
        "cosine_max": float(max(r["cosine"] for r in rows)),
        "matched_class_cosine": float(matched.mean()) if matched.size else float("nan"),
        "mismatched_class_cosine": float(mismatched.mean()) if mismatched.size else float("nan"),
        "hamming_threshold": "per-dimension median of training real-image features",
    }
    return MetricReport("correlation", rows, metrics, fingerprint,
                        notes=["reference-scale bounds (hamming <= 0.15, cosine >= 0.70) are reported, not asserted"])


# -----------------------------------------------------------------------------
# tag-neighbour baseline

def tag_incidence(records, vocab=None):
    if vocab is None:
        vocab = sorted({t for r in records for t in r.tags})
    index = {t: i for i, t in enumerate(vocab)}
    mat = np.zeros((len(records), len(vocab)), dtype=bool)
    for i, r in enumerate(records):
        for t in r.tags:
            if t in index:
                mat[i, index[t]] = True
    return mat, vocab


def jaccard_neighbors(queries, train_records, K_nn) -> np.ndarray:
    """Indices of the ``K_nn`` training records with the highest tag Jaccard to each query.

    Ties are broken by record id; a query never retrieves itself.
    """
    if K_nn > len(train_records) - (1 if set(r.record_id for r in queries) & set(r.record_id for r in train_records) else 0):
        raise ValueError(f"K_nn={K_nn} exceeds the usable training set size")
    train_mat, vocab = tag_incidence(train_records)
    query_mat, _ = tag_incidence(queries, vocab)
    sims = _kernels.jaccard_matrix(query_mat, train_mat)
    ids = [r.record_id for r in train_records]
    id_rank = np.argsort(np.argsort(np.array(ids, dtype=object)))
    out = np.empty((len(queries), K_nn), dtype=np.int64)
    for q, rec in enumerate(queries):
        order = np.lexsort((id_rank, -sims[q]))
        order = [j for j in order if ids[j] != rec.record_id][:K_nn]
        out[q] = order
    return out


def neighbor_companions(queries, train_records, K_nn) -> np.ndarray:
    nbrs = jaccard_neighbors(queries, train_records, K_nn)
    train_imgs = _real_images(train_records)
    return train_imgs[nbrs]


def jcnn_nn_baseline(train_records, test_records, K_nn, config: RunConfig, vocab) -> dict:
    """Train the RS classifier with retrieved neighbour images in place of synthetic ones."""
    dtype = DTYPES[config.dtype]
    cfg = config.replace(**{"phase2.mode": "RS", "phase2.K_synth": K_nn})
    train = build_classifier_data(train_records, neighbor_companions(train_records, train_records, K_nn), vocab, dtype)
    test = build_classifier_data(test_records, neighbor_companions(test_records, train_records, K_nn), vocab, dtype)
    num_classes = 1 + max(r.label for r in list(train_records) + list(test_records))
    model = build_classifier(cfg, len(vocab), num_classes, "RS", K_nn)
    trace, _ = fit_classifier(model, train, test, cfg, np.random.default_rng([cfg.seeds.data, 3]))
    return {"K_nn": K_nn, "accuracy": trace[-1]["test_acc"] if trace else float("nan"),
            "train_accuracy": trace[-1]["train_acc"] if trace else float("nan")}


def jcnn_sweep(train_records, test_records, config: RunConfig, vocab, K_values=(1, 2, 3, 4, 5),
               fingerprint="") -> MetricReport:
    rows = [jcnn_nn_baseline(train_records, test_records, k, config, vocab) for k in K_values]
    best = max(rows, key=lambda r: r["accuracy"])
    return MetricReport("jcnn", rows, {"best_K_nn": best["K_nn"], "best_accuracy": best["accuracy"]}, fingerprint)


# -----------------------------------------------------------------------------
# ablations

def _mean_std(values):
    values = np.asarray(values, dtype=np.float64)
    return float(values.mean()), float(values.std(ddof=0))


def k_sweep(train_records, test_records, gan_ckpt: Checkpoint, config: RunConfig,
            K_values=(1, 2, 3, 5), modes=("S", "RS", "RST"), seeds=(0, 1, 2), fingerprint="") -> MetricReport:
    """Accuracy per (K, mode) over seeds; smaller K uses the first K branches."""
    gan, vocab, _ = load_gan(gan_ckpt)
    cache = SyntheticCache(gan, vocab, config.seeds.noise, gan_fingerprint(gan_ckpt))
    rows = []
    for K in K_values:
        for mode in modes:
            for seed in seeds:
                cfg = config.replace(**{"seeds.data": seed, "seeds.init": seed})
                res = train_phase2(train_records, gan_ckpt, cfg, test_records, mode=mode, K=K, cache=cache)
                rows.append({"K": K, "mode": mode, "seed": seed, "accuracy": res.trace[-1]["test_acc"]})
    metrics = {}
    for mode in modes:
        means = []
        for K in K_values:
            m, s = _mean_std([r["accuracy"] for r in rows if r["K"] == K and r["mode"] == mode])
            metrics[f"{mode}_K{K}_mean"] = m
            metrics[f"{mode}_K{K}_std"] = s
            means.append(m)
        rho = sps.spearmanr(K_values, means).statistic if len(K_values) > 1 and np.ptp(means) > 0 else float("nan")
        metrics[f"{mode}_spearman"] = float(rho)
    return MetricReport("k-sweep", rows, metrics, fingerprint,
                        notes=["monotone trend statistic is reported, not asserted"])


def train_k_separate_gans(train_records, config: RunConfig, K: int):
    """K single-branch models trained one after another, each with its own discriminators."""
    ckpts = []
    for k in range(K):
        cfg = config.replace(**{"stage.K": 1, "stage.tied_weights": True,
                                "seeds.noise": config.seeds.noise + 1000 * (k + 1),
                                "seeds.init": config.seeds.init + 1000 * (k + 1)})
        ckpts.append(train_phase1(train_records, cfg).checkpoint)
    return ckpts


def separate_gan_companions(records, ckpts, noise_seed) -> np.ndarray:
    """One image per separately trained model, stacked as N x K x 3 x s x s."""
    out = []
    models = [load_gan(c)[:2] for c in ckpts]
    for rec in records:
        seed = record_seed(noise_seed, rec.record_id)
        imgs = [synthesize(rec.captions[0], 1, m, v, seed=seed + 7919 * k)[0].numpy()
                for k, (m, v) in enumerate(models)]
        out.append(np.stack(imgs))
    return np.stack(out)


def kgan_vs_gman(train_records, test_records, gman_ckpt: Checkpoint, config: RunConfig,
                 separate_ckpts=None, fingerprint="") -> MetricReport:
    """Diversity and RST accuracy: one tied K-branch model vs K separately trained GANs."""
    gan, vocab, gcfg = load_gan(gman_ckpt)
    K = config.phase2.K_synth
    dtype = DTYPES[config.dtype]
    if separate_ckpts is None:
        separate_ckpts = train_k_separate_gans(train_records, gcfg.replace(**{
            "phase1.iterations": config.phase1.iterations}), K)
    cache = SyntheticCache(gan, vocab, config.seeds.noise, gan_fingerprint(gman_ckpt))
    gman_train = synthetic_companions(train_records, cache, K)
    gman_test = synthetic_companions(test_records, cache, K)
    sep_train = separate_gan_companions(train_records, separate_ckpts, config.seeds.noise)
    sep_test = separate_gan_companions(test_records, separate_ckpts, config.seeds.noise)

    num_classes = 1 + max(r.label for r in list(train_records) + list(test_records))
    results = {}
    for name, (tr, te) in {"gman": (gman_train, gman_test), "k_gans": (sep_train, sep_test)}.items():
        cfg = config.replace(**{"phase2.mode": "RST"})
        model = build_classifier(cfg, len(vocab), num_classes, "RST", K)
        train = build_classifier_data(train_records, tr, vocab, dtype)
        test = build_classifier_data(test_records, te, vocab, dtype)
        trace, _ = fit_classifier(model, train, test, cfg, np.random.default_rng([cfg.seeds.data, 4]))
        bb = model.synth_backbone or model.backbone
        divs = [diversity(torch.from_numpy(te[i]), bb) for i in range(len(test_records))] if K >= 2 else [float("nan")]
        results[name] = {"accuracy": trace[-1]["test_acc"] if trace else float("nan"),
                         "diversity": float(np.mean(divs))}
    # common feature space for a like-for-like diversity comparison
    probe = _seeded_init(_seed_from(config.seeds.init, 9),
                         lambda: Backbone(config.stage.scales[-1], config.vision.widths, config.vision.d))
    pixel = {}
    for name, te in (("gman", gman_test), ("k_gans", sep_test)):
        if K >= 2:
            pixel[name] = float(np.mean([_kernels.mean_pairwise_l2(te[i].reshape(K, -1)) for i in range(len(te))]))
            results[name]["probe_diversity"] = float(np.mean([diversity(torch.from_numpy(te[i]), probe)
                                                              for i in range(len(te))]))
    rows = [{"model": name, **vals, "pixel_diversity": pixel.get(name, float("nan"))} for name, vals in results.items()]
    metrics = {f"{r['model']}_{k}": v for r in rows for k, v in r.items() if k != "model"}
    metrics["gman_more_diverse"] = bool(results["gman"]["diversity"] >= results["k_gans"]["diversity"])
    return MetricReport("kgan-vs-gman", rows, metrics, fingerprint,
                        notes=["separate models differ by seed at unit noise variance",
                               "diversity ordering is reported, not asserted"])


# -----------------------------------------------------------------------------
# oracle classifier for synthetic-image fidelity

class OracleClassifier(nn.Module):
    """Plain conv / max-pool CNN with a dense head; independent of the pipeline's backbone."""

    def __init__(self, size, num_classes, widths=(16, 32, 32)):
        super().__init__()
        layers, c_in = [], 3
        for w in widths:
            layers += [nn.Conv2d(c_in, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c_in = w
        self.features = nn.Sequential(*layers)
        flat = c_in * (size // 2 ** len(widths)) ** 2
        self.fc = nn.Sequential(nn.Linear(flat, 64), nn.ReLU(), nn.Linear(64, num_classes))

    def forward(self, images):
        return self.fc(self.features(images).flatten(1))


def train_oracle(train_records, seed=0, epochs=60, lr=1e-3, batch_size=16, noise=0.05) -> OracleClassifier:
    """Small CNN trained only on real images; used to grade synthetic images."""
    from vital.train import RMSProp

    images = torch.from_numpy(_real_images(train_records))
    labels = torch.tensor([r.label for r in train_records])
    num_classes = int(labels.max()) + 1
    model = _seeded_init(_seed_from(seed, 5), lambda: OracleClassifier(images.shape[-1], num_classes))
    opt = RMSProp(model.named_parameters(), lr)
    rng = np.random.default_rng([seed, 5])
    gen = torch.Generator().manual_seed(_seed_from(seed, 6))
    for _ in range(epochs):
        model.train()
        order = rng.permutation(len(images))
        for s in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[s: s + batch_size])
            x = images[idx]
            x = (x + noise * torch.randn(x.shape, generator=gen)).clamp(-1, 1)
            loss = nn.functional.cross_entropy(model(x), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


@torch.no_grad()
def oracle_predict(oracle: OracleClassifier, images) -> np.ndarray:
    images = torch.as_tensor(images, dtype=torch.float32)
    return np.concatenate([oracle(images[s: s + 256]).argmax(-1).numpy() for s in range(0, len(images), 256)])


def synthetic_fidelity(oracle: OracleClassifier, gan_ckpt: Checkpoint, records, K=5, noise_seed=0) -> float:
    """Fraction of the K synthetic images per caption that the oracle labels correctly."""
    gan, vocab, _ = load_gan(gan_ckpt)
    cache = SyntheticCache(gan, vocab, noise_seed, gan_fingerprint(gan_ckpt))
    synth = synthetic_companions(records, cache, K)
    preds = oracle_predict(oracle, synth.reshape(-1, *synth.shape[2:]))
    labels = np.repeat([r.label for r in records], K)
    return accuracy(preds, labels)
