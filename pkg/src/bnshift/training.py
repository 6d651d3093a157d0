"""Losses, optimizer, freeze masks, and the experiment runner.

The classification loss sums, over the benign and malignant heads, the
batch-mean binary cross entropies of the local, global, and fusion
predictions, plus a weighted L1 penalty on the saliency maps (mean over
pixels, summed over classes). The domain loss is the batch-mean BCE of the
source/target head averaged over both label slots, so a uniform prediction
costs ln 2. The total is their unweighted sum.

Freeze mode "bnfc" trains only BN scale/shift and the fully connected
layers; convolutional weights stay bit-identical while BN running
statistics keep updating in TRAIN mode.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics as M
from .adversarial import LambdaScheduler, schedule_lambda
from .batchnorm import StatsMode, set_mode
from .datagen import BatchComposer, DomainDataset
from .model import GlobalLocalFusionNet, ModelConfig, load_checkpoint, save_checkpoint
from .tensor import Tensor, narrow, no_grad

__all__ = [
    "DivergenceError",
    "FreezeMode",
    "ExperimentSpec",
    "classification_loss",
    "domain_loss",
    "total_loss",
    "Adam",
    "apply_freeze",
    "sample_hyperparams",
    "run_experiment",
    "evaluate_model",
    "predict_scores",
    "parse_stats",
    "write_metrics_csv",
    "derive_rng",
    "worker_count",
    "TOOL_VERSION",
]

log = logging.getLogger("bnshift.training")

TOOL_VERSION = "bnshift-0.1.0"

_CLAMP = 1e-12


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class FreezeMode:
    FULL = "full"
    BNFC = "bnfc"


# -- losses --------------------------------------------------------------------


def _bce_elements(pred, target):
    p = pred.clip(_CLAMP, 1.0 - _CLAMP)
    y = Tensor(target)
    one_minus_y = Tensor(1.0 - target)
    return -(y * p.log() + one_minus_y * (1.0 - p).log())


def bce_per_class(pred, target):
    """Sum over class slots of the batch-mean BCE: total elementwise BCE / N."""
    n = pred.shape[0]
    return _bce_elements(pred, target).sum() / n


def classification_loss(y_global, y_local, y_fusion, labels, saliency, beta_reg=0.0):
    """Three-head BCE plus the saliency L1 penalty."""
    if beta_reg < 0:
        raise ValueError("beta_reg must be >= 0")
    for head in (y_global, y_local, y_fusion):
        if (head.data <= 0).any() or (head.data >= 1).any():
            raise ValueError("head predictions must lie strictly inside (0, 1)")
    loss = (
        bce_per_class(y_local, labels)
        + bce_per_class(y_global, labels)
        + bce_per_class(y_fusion, labels)
    )
    if beta_reg:
        n, _, h, w = saliency.shape
        loss = loss + saliency.abs().sum() * (beta_reg / (n * h * w))
    return loss


def domain_loss(y_domain, domain_labels):
    """Batch-mean BCE over the {source, target} head, averaged over slots."""
    labels = np.asarray(domain_labels, dtype=np.float64)
    if labels.shape != y_domain.shape or not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("domain labels must be one-hot over {source, target}")
    if not np.allclose(labels.sum(axis=1), 1.0):
        raise ValueError("domain labels must be one-hot over {source, target}")
    return _bce_elements(y_domain, labels).mean()


def total_loss(loss_c, loss_d=None):
    """Unweighted sum; the domain term is simply absent when DAT is off."""
    return loss_c if loss_d is None else loss_c + loss_d


# -- optimizer ---------------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction; steps only the given tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {id(p): [np.zeros_like(p.data), np.zeros_like(p.data), 0] for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            m, v, t = self.state[id(p)]
            t += 1
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad**2
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            self.state[id(p)][2] = t


def apply_freeze(model, mode):
    """Set requires_grad according to the freeze mode; returns trainables."""
    if mode not in (FreezeMode.FULL, FreezeMode.BNFC):
        raise ValueError(f"unknown freeze mode {mode!r}")
    conv_frozen = mode == FreezeMode.BNFC
    for _, conv in model.conv_layers():
        conv.weight.requires_grad = not conv_frozen
        if conv.bias is not None:
            conv.bias.requires_grad = not conv_frozen
    for _, bn in model.bn_layers():
        bn.gamma.requires_grad = True
        bn.beta.requires_grad = True
    for _, fc in model.linear_layers():
        fc.weight.requires_grad = True
        fc.bias.requires_grad = True
    return [p for _, p in model.named_parameters() if p.requires_grad]


def sample_hyperparams(rng, lr_range=(10**-5.5, 10**-4.0), beta_range=(10**-5.5, 10**-3.5)):
    """Log-uniform draw of (learning rate, saliency L1 weight)."""
    lr = 10.0 ** rng.uniform(math.log10(lr_range[0]), math.log10(lr_range[1]))
    beta = 10.0 ** rng.uniform(math.log10(beta_range[0]), math.log10(beta_range[1]))
    return lr, beta


# -- experiment plumbing ----------------------------------------------------------


def derive_rng(*keys):
    """Deterministic generator from arbitrary hashable keys."""
    digest = hashlib.sha256(repr(keys).encode()).digest()
    return np.random.default_rng(np.random.SeedSequence(int.from_bytes(digest[:16], "little")))


def worker_count(default=4):
    cap = os.environ.get("BNSHIFT_THREADS")
    n = int(cap) if cap else default
    return max(1, min(n, os.cpu_count() or 1))


def parse_stats(token):
    """"tr" or "tt<batch>"; bare "tt" defaults to batch 8."""
    if token == "tr":
        return StatsMode.TR, None
    if token.startswith("tt"):
        batch = int(token[2:]) if token[2:] else 8
        if batch < 2:
            raise ValueError("tt batch size must be >= 2")
        return StatsMode.TT, batch
    raise ValueError(f"unknown stats mode {token!r} (expected tr, tt8, tt64, ...)")


@dataclass
class ExperimentSpec:
    """One train-and-evaluate run of the experiment matrix."""

    name: str
    sources: list
    target: str | None = None
    stats: str = "tr"
    freeze: str = FreezeMode.FULL
    dat: bool = False
    epochs: int = 15
    seed: int = 0
    lr: float = 1e-3
    beta_reg: float = 1e-4
    init_checkpoint: str | None = None
    input_transform: str = "none"
    eval_on: list | None = None
    batch_size: int = 8
    steps_per_epoch: int | None = None
    tau_max: float = 1.0
    gamma_rate: float = 10.0

    def __post_init__(self):
        parse_stats(self.stats)
        if self.dat and not self.target:
            raise ValueError("a DAT spec must name a target domain")
        if self.input_transform not in ("none", "unit_range"):
            raise ValueError(f"unknown input transform {self.input_transform!r}")
        if self.freeze not in (FreezeMode.FULL, FreezeMode.BNFC):
            raise ValueError(f"unknown freeze mode {self.freeze!r}")
        if self.epochs < 0 or self.batch_size % 4:
            raise ValueError("epochs must be >= 0 and batch size divisible by 4")


def _transform_images(images, transform):
    if transform == "none":
        return images
    flat = images.reshape(images.shape[0], -1)
    lo = flat.min(axis=1)[:, None, None, None]
    hi = flat.max(axis=1)[:, None, None, None]
    span = np.where(hi > lo, hi - lo, 1.0)
    return (images - lo) / span


def predict_scores(model, images, stats_mode, tt_batch=None, chunk=64):
    """Malignant-class fusion probabilities for a stream of images.

    TT mode partitions the stream into batches of ``tt_batch`` in order; a
    final remainder of fewer than 2 images is merged into the previous
    batch. TR mode chunks only for memory.
    """
    if isinstance(stats_mode, StatsMode):
        mode = stats_mode
    else:
        mode, parsed_batch = parse_stats(stats_mode)
        tt_batch = tt_batch if tt_batch is not None else parsed_batch
    if mode is StatsMode.TT:
        if tt_batch is None:
            raise ValueError("TT scoring needs a tt batch size")
        bounds = list(range(0, len(images), tt_batch))
        if len(bounds) > 1 and len(images) - bounds[-1] < 2:
            bounds.pop()
        set_mode(model, StatsMode.TT, tt_batch)
    else:
        bounds = list(range(0, len(images), chunk))
        set_mode(model, StatsMode.TR)
    bounds.append(len(images))
    scores = np.empty(len(images))
    with no_grad():
        for a, b in zip(bounds[:-1], bounds[1:]):
            out = model.forward(Tensor(images[a:b]))
            scores[a:b] = out.y_fusion.data[:, 1]
    return scores


def _breast_metrics(dataset, split, scores_fn):
    records = dataset.split_records(split)
    idx = dataset.indices(split)
    scores = scores_fn(dataset.images[idx])
    breasts = M.aggregate_views(records, scores)
    values = np.array([b.score for b in breasts])
    labels = np.array([b.label for b in breasts])
    return breasts, values, labels


def evaluate_model(model, dataset, stats_token, experiment="eval", split="test",
                   input_transform="none", n_resamples=1000, seed=0):
    """Breast-level ROC/PR AUC with bootstrap intervals on one dataset split."""
    mode, tt_batch = parse_stats(stats_token)

    def score(images):
        return predict_scores(model, _transform_images(images, input_transform), mode, tt_batch)

    breasts, values, labels = _breast_metrics(dataset, split, score)
    roc = M.roc_auc(values, labels)
    pr = M.pr_auc(values, labels)
    rng_roc = derive_rng(seed, experiment, dataset.spec.name, stats_token, "roc")
    rng_pr = derive_rng(seed, experiment, dataset.spec.name, stats_token, "pr")
    roc_ci = M.bootstrap_ci(values, labels, M.roc_auc, n_resamples, rng_roc)
    pr_ci = M.bootstrap_ci(values, labels, M.pr_auc, n_resamples, rng_pr)
    return M.MetricsReport(
        experiment, dataset.spec.name, stats_token, len(breasts), roc, roc_ci, pr, pr_ci
    )


def _validation_pr_auc(model, sources):
    def score(images):
        return predict_scores(model, images, StatsMode.TR)

    values, labels = [], []
    for ds in sources:
        _, v, l = _breast_metrics(ds, "val", score)
        values.append(v)
        labels.append(l)
    return M.pr_auc(np.concatenate(values), np.concatenate(labels))


def config_digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def csv_header_line(seed, digest):
    return f"# tool={TOOL_VERSION} seed={seed} config=sha256:{digest}\n"


def write_metrics_csv(path, reports, seed, digest):
    """Per-experiment metrics; ci columns carry the ROC-AUC interval."""
    with open(path, "w") as f:
        f.write(csv_header_line(seed, digest))
        f.write("experiment,dataset,stats_mode,roc_auc,pr_auc,ci_low,ci_high\n")
        for r in reports:
            f.write(
                f"{r.experiment},{r.dataset},{r.stats_mode},"
                f"{r.roc_auc:.6f},{r.pr_auc:.6f},{r.roc_ci[0]:.6f},{r.roc_ci[1]:.6f}\n"
            )


# -- the runner ----------------------------------------------------------------------


def train_model(spec, registry, model_cfg=None, init_model=None):
    """Train a model per spec; returns (model, history dict)."""
    sources = [_resolve(registry, name) for name in spec.sources]
    target = _resolve(registry, spec.target) if spec.dat else None
    if init_model is not None:
        model = init_model
    elif spec.init_checkpoint:
        model, _ = load_checkpoint(spec.init_checkpoint)
    else:
        model = GlobalLocalFusionNet(model_cfg or ModelConfig(), rng=derive_rng(spec.seed, "init"))
    trainables = apply_freeze(model, spec.freeze)
    optimizer = Adam(trainables, lr=spec.lr)
    composer = BatchComposer(
        sources, derive_rng(spec.seed, "batches"), target=target, batch_size=spec.batch_size
    )
    n_train = sum(len(ds.indices("train")) for ds in sources)
    steps = spec.steps_per_epoch or max(1, math.ceil(n_train / spec.batch_size))
    scheduler = LambdaScheduler(spec.tau_max, spec.gamma_rate)
    history = {"val_pr_auc": [], "lambda": [], "train_loss": []}
    best_state, best_val = model.state_arrays(), -np.inf

    for epoch in range(spec.epochs):
        lam = schedule_lambda(epoch / spec.epochs, scheduler) if spec.dat else None
        set_mode(model, StatsMode.TRAIN)
        epoch_loss = 0.0
        for _ in range(steps):
            batch = composer.dat_batch() if spec.dat else composer.classification_batch()
            out = model.forward(Tensor(batch.images), lambda_domain=lam)
            n_src = batch.n_source
            if n_src < batch.images.shape[0]:
                loss_c = classification_loss(
                    narrow(out.y_global, 0, n_src),
                    narrow(out.y_local, 0, n_src),
                    narrow(out.y_fusion, 0, n_src),
                    batch.labels[:n_src],
                    narrow(out.saliency, 0, n_src),
                    spec.beta_reg,
                )
            else:
                loss_c = classification_loss(
                    out.y_global, out.y_local, out.y_fusion, batch.labels,
                    out.saliency, spec.beta_reg,
                )
            loss_d = domain_loss(out.y_domain, batch.domains) if spec.dat else None
            loss = total_loss(loss_c, loss_d)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(
                    f"{spec.name}: non-finite loss at epoch {epoch}, aborting"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += value
        val = _validation_pr_auc(model, sources)
        history["val_pr_auc"].append(val)
        history["lambda"].append(lam)
        history["train_loss"].append(epoch_loss / steps)
        if val > best_val:
            best_val, best_state = val, model.state_arrays()
        log.info("%s epoch %d: loss %.4f val PR-AUC %.4f", spec.name, epoch, epoch_loss / steps, val)

    model.load_state_arrays(best_state)
    history["best_val_pr_auc"] = None if spec.epochs == 0 else max(history["val_pr_auc"])
    return model, history


def _resolve(registry, name):
    ds = registry.get(name)
    if ds is None:
        raise KeyError(f"dataset {name!r} is not registered")
    if not isinstance(ds, DomainDataset):
        raise TypeError(f"registry entry {name!r} is not a dataset")
    return ds


def run_experiment(spec, registry, out_dir, model_cfg=None):
    """Train per spec, checkpoint, then evaluate on every registered test set."""
    os.makedirs(out_dir, exist_ok=True)
    digest = config_digest(asdict(spec))
    model, history = train_model(spec, registry, model_cfg)
    ckpt_path = os.path.join(out_dir, "checkpoint.bnck")
    save_checkpoint(ckpt_path, model, meta={"spec": asdict(spec), "seed": spec.seed,
                                            "tool": TOOL_VERSION, "config_digest": digest})
    eval_names = spec.eval_on or sorted(registry)
    reports = _evaluate_many(model, [(name, registry[name]) for name in eval_names], spec)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), reports, spec.seed, digest)
    run_log = {
        "tool": TOOL_VERSION,
        "seed": spec.seed,
        "config_digest": digest,
        "spec": asdict(spec),
        "history": history,
    }
    with open(os.path.join(out_dir, "run_log.json"), "w") as f:
        json.dump(run_log, f, sort_keys=True, indent=1)
    return model, reports, history


def _evaluate_many(model, named_datasets, spec):
    mode, tt_batch = parse_stats(spec.stats)

    def one(item):
        name, ds = item
        return evaluate_model(
            model, ds, spec.stats, experiment=spec.name,
            input_transform=spec.input_transform, seed=spec.seed,
        )

    if mode is StatsMode.TT or len(named_datasets) == 1 or worker_count() == 1:
        return [one(item) for item in named_datasets]
    # TR evaluation is read-only on the model; fan out across test sets
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(one, named_datasets))
