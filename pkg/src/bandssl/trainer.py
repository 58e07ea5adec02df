"""Two-phase training: pretext pretraining, richness fine-tuning, and the
Base-vs-Ours fractional-data sweep."""

from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core_types import CANONICAL_BANDS, ClusterObservation, SplitPlan, normalize_pixels
from .losses_metrics import mae as mae_metric
from .losses_metrics import sigma as sigma_metric
from .losses_metrics import torch_loss
from .model import (
    N_BANDS,
    PERMUTATIONS,
    BandSSLModel,
    FeatureExtractorConfig,
    ModelConfig,
    build_model,
)
from .persistence import load_state_into, read_checkpoint

log = logging.getLogger(__name__)

N_FOLDS = 10
DEFAULT_FRACTIONS = (0.01, 0.05, 0.10, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90, 1.00)
DEFAULT_TRIALS = 3


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}")


class SweepRunError(RuntimeError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    mode: str = "band_classification"
    normalization: str = "per_image_zscore"

    def __post_init__(self):
        if self.epochs < 1 or not self.lr > 0 or not 0 <= self.momentum < 1 or self.batch_size < 1:
            raise ValueError(f"invalid PretrainConfig {self}")
        if self.mode not in ("band_classification", "channel_ordering"):
            raise ValueError(f"unknown pretext mode {self.mode!r}")


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 5e-6
    momentum: float = 0.9
    alpha: float = 1.0
    epochs: int = 100
    batch_size: int = 32
    extractor_mode: str = "joint"
    fraction: float = 1.0
    trial_seed: int = 0
    patience: int | None = 15
    nested_fractions: bool = False
    normalization: str = "per_image_zscore"

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.extractor_mode not in ("fixed", "joint"):
            raise ValueError(f"extractor_mode must be fixed or joint, got {self.extractor_mode!r}")
        if self.epochs < 1 or not self.lr > 0 or not 0 <= self.momentum < 1 or self.alpha < 0:
            raise ValueError(f"invalid FinetuneConfig {self}")


# ---------------------------------------------------------------------------
# splitting


def make_splits(dataset: list[ClusterObservation], seed: int = 0) -> SplitPlan:
    """4:1 pretext split over all clusters, 10 regression folds over labeled ones."""
    if not dataset:
        raise ValueError("dataset is empty")
    ids = [obs.cluster_id for obs in dataset]
    if len(set(ids)) != len(ids):
        seen, dup = set(), set()
        for i in ids:
            (dup if i in seen else seen).add(i)
        raise ValueError(f"duplicate cluster_ids: {sorted(map(str, dup))[:5]}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_test = int(round(len(ids) / 5))
    pretext_test = frozenset(ids[k] for k in order[:n_test])
    pretext_train = frozenset(ids[k] for k in order[n_test:])
    labeled = [obs.cluster_id for obs in dataset if obs.richness is not None]
    order = rng.permutation(len(labeled))
    folds = tuple(frozenset(labeled[k] for k in chunk) for chunk in np.array_split(order, N_FOLDS))
    return SplitPlan(pretext_train, pretext_test, folds, seed)


def _subset_rng(plan_seed: int, fold: int, fraction: float, trial_seed: int) -> np.random.Generator:
    key = [int(plan_seed), int(fold), int(round(fraction * 1_000_000)), int(trial_seed)]
    return np.random.default_rng(np.random.SeedSequence(key))


def select_training_subset(
    plan: SplitPlan, fold: int, fraction: float, trial_seed: int, nested: bool = False
) -> list:
    """Training cluster ids for one (fold, fraction, trial).

    Depends only on the plan seed, fold, fraction and trial seed, so Base and
    Ours always see the same clusters. The subset is drawn from each training
    fold in proportion to its size (largest remainder). With ``nested`` the
    subsets of one trial are prefixes of a single ordering, so smaller
    fractions are contained in larger ones.
    """
    if not 0 <= fold < len(plan.regression_folds):
        raise ValueError(f"fold must be in [0, {len(plan.regression_folds) - 1}], got {fold}")
    folds = [sorted(f, key=str) for f in plan.training_folds(fold)]
    total = sum(len(f) for f in folds)
    if total == 0:
        raise ValueError("no labeled training clusters")
    k = min(total, max(1, int(round(fraction * total))))
    if nested:
        pool = sorted((c for f in folds for c in f), key=str)
        rng = _subset_rng(plan.seed, fold, 0.0, trial_seed)
        return sorted((pool[j] for j in rng.permutation(total)[:k]), key=str)
    rng = _subset_rng(plan.seed, fold, fraction, trial_seed)
    exact = np.array([len(f) * k / total for f in folds])
    quota = np.floor(exact).astype(int)
    remainder = exact - quota
    tiebreak = rng.random(len(folds))
    for j in np.lexsort((tiebreak, -remainder))[: k - quota.sum()]:
        quota[j] += 1
    chosen = []
    for f, q in zip(folds, quota):
        chosen.extend(f[j] for j in rng.permutation(len(f))[:q])
    return sorted(chosen, key=str)


# ---------------------------------------------------------------------------
# data preparation


def _normalized_stacks(dataset, scheme: str) -> dict:
    out = {}
    for obs in dataset:
        out[obs.cluster_id] = np.stack(
            [normalize_pixels(obs.images[b], scheme).pixels for b in CANONICAL_BANDS]
        ).astype(np.float32)
    return out


def band_samples(dataset, ids, scheme: str = "per_image_zscore") -> tuple[torch.Tensor, torch.Tensor]:
    """Every band image of the given clusters as an independent sample."""
    stacks = _normalized_stacks([o for o in dataset if o.cluster_id in ids], scheme)
    keys = sorted(stacks, key=str)
    if not keys:
        return torch.empty(0), torch.empty(0, dtype=torch.long)
    x = torch.from_numpy(np.concatenate([stacks[k] for k in keys]))[:, None]
    y = torch.arange(N_BANDS).repeat(len(keys))
    return x, y


def _by_id(dataset) -> dict:
    return {obs.cluster_id: obs for obs in dataset}


# ---------------------------------------------------------------------------
# pretext phase


@dataclass
class PretrainResult:
    model: BandSSLModel
    history: list[dict]
    samples_per_epoch: int
    config: PretrainConfig


def _batches(n: int, batch_size: int, gen: torch.Generator | None):
    order = torch.randperm(n, generator=gen) if gen is not None else torch.arange(n)
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()  # fold a lone trailing sample into the previous batch (BatchNorm)
    for k, start in enumerate(starts):
        end = starts[k + 1] if k + 1 < len(starts) else n
        yield order[start:end]


@torch.no_grad()
def _accuracy(model: BandSSLModel, x: torch.Tensor, y: torch.Tensor, batch_size: int = 256) -> float:
    if len(y) == 0:
        return float("nan")
    model.eval()
    correct = 0
    for idx in _batches(len(y), batch_size, None):
        correct += int((model.pretext_logits(x[idx]).argmax(1) == y[idx]).sum())
    return correct / len(y)


def _channel_order_split(n: int, seed: int):
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n / 5))
    return order[n_test:], order[:n_test]


def _permute_batch(images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    perms = torch.tensor(PERMUTATIONS)[labels]  # (N, 3)
    idx = perms[:, :, None, None].expand(-1, -1, *images.shape[2:])
    return torch.gather(images, 1, idx)


def pretrain(
    dataset,
    cfg: PretrainConfig = PretrainConfig(),
    plan: SplitPlan | None = None,
    model_cfg: ModelConfig | None = None,
    target_accuracy: float | None = None,
) -> PretrainResult:
    """Train the pretext classifier with SGD + cross-entropy.

    Band mode: ``dataset`` is a list of ClusterObservation and each band image
    of a pretext-train cluster is one sample. Channel-ordering mode:
    ``dataset`` is an (N, 3, H, W) array; every epoch each training image is
    shown under a freshly drawn channel permutation.

    ``target_accuracy`` stops early once held-out accuracy exceeds it.
    """
    band_mode = cfg.mode == "band_classification"
    if model_cfg is None:
        model_cfg = ModelConfig(
            extractor=FeatureExtractorConfig(input_channels=1 if band_mode else 3, seed=cfg.seed),
            pretext_classes=N_BANDS if band_mode else len(PERMUTATIONS),
        )
    gen = torch.Generator().manual_seed(cfg.seed)

    if band_mode:
        plan = plan or make_splits(dataset, cfg.seed)
        x_train, y_train = band_samples(dataset, plan.pretext_train, cfg.normalization)
        x_test, y_test = band_samples(dataset, plan.pretext_test, cfg.normalization)
    else:
        images = torch.as_tensor(np.asarray(dataset, dtype=np.float32))
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"channel ordering needs (N, 3, H, W) images, got {tuple(images.shape)}")
        tr, te = _channel_order_split(len(images), cfg.seed)
        x_train, x_test = images[tr], images[te]
        y_train = torch.zeros(len(tr), dtype=torch.long)
        y_test = torch.randint(len(PERMUTATIONS), (len(te),), generator=torch.Generator().manual_seed(cfg.seed + 1))
        x_test = _permute_batch(x_test, y_test)
    if len(x_train) == 0:
        raise ValueError("pretext training partition is empty")

    model = build_model(model_cfg, with_regression=False)
    params = list(model.extractor.parameters()) + list(model.pretext_head.parameters())
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        if not band_mode:
            y_train = torch.randint(len(PERMUTATIONS), (len(x_train),), generator=gen)
        model.train()
        total, correct, seen = 0.0, 0, 0
        for idx in _batches(len(x_train), cfg.batch_size, gen):
            xb = x_train[idx] if band_mode else _permute_batch(x_train[idx], y_train[idx])
            yb = y_train[idx]
            logits = model.pretext_logits(xb)
            loss = F.cross_entropy(logits, yb)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == yb).sum())
            seen += len(idx)
        rec = {
            "epoch": epoch,
            "train_loss": total / max(seen, 1),
            "train_acc": correct / max(seen, 1),
            "test_acc": _accuracy(model, x_test, y_test),
        }
        history.append(rec)
        log.info("pretrain epoch %d: %s", epoch, rec)
        if target_accuracy is not None and rec["test_acc"] > target_accuracy:
            break
    model.eval()
    return PretrainResult(model, history, len(x_train), cfg)


# ---------------------------------------------------------------------------
# fine-tuning phase


@dataclass
class FinetuneResult:
    model: BandSSLModel
    mae: float
    sigma: float
    train_ids: list
    test_ids: list
    best_epoch: int
    epochs_run: int
    stop_reason: str
    history: list[dict] = field(default_factory=list)
    predictions: np.ndarray | None = None


def _extractor_state(extractor_init):
    """Normalise the pretrained source into a {name: array} dict for the extractor, or None."""
    if extractor_init is None or (isinstance(extractor_init, str) and extractor_init == "random"):
        return None
    if isinstance(extractor_init, BandSSLModel):
        return {k: v.detach().numpy().copy() for k, v in extractor_init.extractor.state_dict().items()}
    if isinstance(extractor_init, (str, Path)):
        arrays, _ = read_checkpoint(extractor_init)
        return {k[len("extractor."):]: v for k, v in arrays.items() if k.startswith("extractor.")}
    if isinstance(extractor_init, dict):
        return extractor_init
    raise TypeError(f"unsupported extractor_init {type(extractor_init).__name__}")


def _predict(model: BandSSLModel, stacks: torch.Tensor, batch_size: int = 32) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(stacks), batch_size):
            out.append(model(stacks[start:start + batch_size]))
    return torch.cat(out).numpy().astype(np.float64) if out else np.empty(0)


def _predict_head(model: BandSSLModel, fused: torch.Tensor) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        return model.regression_head(fused).numpy().astype(np.float64)


@torch.no_grad()
def _fused(model: BandSSLModel, stacks: torch.Tensor, batch_size: int = 32) -> torch.Tensor:
    model.eval()
    return torch.cat([model.fused_features(stacks[s:s + batch_size]) for s in range(0, len(stacks), batch_size)])


def finetune(
    dataset,
    extractor_init,
    cfg: FinetuneConfig,
    plan: SplitPlan,
    fold: int,
    model_cfg: ModelConfig = ModelConfig(),
) -> FinetuneResult:
    """Train the richness branch on a fraction of the nine training folds and
    score MAE / Sigma on held-out ``fold``.

    ``extractor_init`` is ``None``/"random" (Base) or a pretrained source (Ours):
    a BandSSLModel, a checkpoint path, or an extractor state dict.
    """
    train_ids = select_training_subset(plan, fold, cfg.fraction, cfg.trial_seed, cfg.nested_fractions)
    test_ids = sorted(plan.regression_folds[fold], key=str)
    by_id = _by_id(dataset)
    stacks = _normalized_stacks([by_id[c] for c in train_ids + test_ids], cfg.normalization)

    def tensor(ids):
        return torch.from_numpy(np.stack([stacks[c] for c in ids]))[:, :, None]

    x_train, x_test = tensor(train_ids), tensor(test_ids)
    y_train = torch.tensor([by_id[c].richness for c in train_ids], dtype=torch.float32)
    y_test = np.array([by_id[c].richness for c in test_ids], dtype=np.float64)

    # Base and Ours share initial head weights; Base's extractor seed depends on the trial only
    run_seed = int(np.random.SeedSequence([plan.seed, fold, cfg.trial_seed]).generate_state(1)[0] % 2**31)
    mcfg = replace(
        model_cfg,
        extractor=replace(model_cfg.extractor, input_channels=1, seed=run_seed),
        head=replace(model_cfg.head, seed=run_seed + 1),
        pretext_classes=N_BANDS,
    )
    model = build_model(mcfg)
    state = _extractor_state(extractor_init)
    if state is not None:
        load_state_into(model.extractor, state)
    model.regression_head.set_output_bias(float(y_train.mean()))
    fixed = cfg.extractor_mode == "fixed"
    model.freeze_extractor(fixed)

    params = list(model.regression_head.parameters())
    if not fixed:
        params += list(model.extractor.parameters())
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    gen = torch.Generator().manual_seed(run_seed)

    if fixed:
        # frozen extractor in eval mode: features are constant, compute once
        f_train, f_test = _fused(model, x_train), _fused(model, x_test)
        forward_train = lambda idx: model.regression_head(f_train[idx])  # noqa: E731
        predict_test = lambda: _predict_head(model, f_test)  # noqa: E731
    else:
        forward_train = lambda idx: model(x_train[idx])  # noqa: E731
        predict_test = lambda: _predict(model, x_test)  # noqa: E731

    best = (math.inf, 0, None)
    history, stale, stop_reason, epoch = [], 0, "max_epochs", 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        total = 0.0
        for idx in _batches(len(train_ids), cfg.batch_size, gen):
            loss = torch_loss(y_train[idx], forward_train(idx), cfg.alpha)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        pred = predict_test()
        if not np.all(np.isfinite(pred)):
            raise TrainingDivergedError(epoch, float("nan"))
        held_mae = mae_metric(y_test, pred)
        history.append({"epoch": epoch, "train_loss": total / len(train_ids), "held_mae": held_mae})
        if held_mae < best[0]:
            best = (held_mae, epoch, copy.deepcopy(model.state_dict()))
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                stop_reason = f"early_stop(patience={cfg.patience})"
                break
    model.load_state_dict(best[2])
    pred = predict_test()
    return FinetuneResult(
        model=model,
        mae=mae_metric(y_test, pred),
        sigma=sigma_metric(y_test, pred),
        train_ids=train_ids,
        test_ids=test_ids,
        best_epoch=best[1],
        epochs_run=epoch,
        stop_reason=stop_reason,
        history=history,
        predictions=pred,
    )


# ---------------------------------------------------------------------------
# sweep


@dataclass
class SweepResult:
    rows: list[dict]
    folds: tuple[int, ...] = tuple(range(N_FOLDS))

    @property
    def aggregates(self) -> dict:
        return aggregate_rows(self.rows)

    def check(self, trials: int) -> None:
        counts: dict = {}
        for r in self.rows:
            counts[(r["model"], r["fraction"])] = counts.get((r["model"], r["fraction"]), 0) + 1
        bad = {k: v for k, v in counts.items() if v != trials * len(self.folds)}
        if bad:
            raise AssertionError(f"row counts per (model, fraction) off: {bad}")


def aggregate_rows(rows) -> dict:
    """{(model, fraction): {"mae": (mean, std), "sigma": (mean, std), "trials": n}}.

    Fold scores are averaged within a trial first; mean/std are over trials.
    """
    per_trial: dict = {}
    for r in rows:
        per_trial.setdefault((r["model"], r["fraction"]), {}).setdefault(r["trial"], []).append(r)
    out = {}
    for key, trials in per_trial.items():
        entry = {"trials": len(trials)}
        for metric in ("mae", "sigma"):
            vals = np.array([np.mean([r[metric] for r in rs]) for _, rs in sorted(trials.items())])
            entry[metric] = (float(vals.mean()), float(vals.std()))
        out[key] = entry
    return out


# dataset handed to forked sweep workers by inheritance rather than pickling
_FORK_DATASET: list = []


def _finetune_job(args):
    dataset, init, cfg, plan, fold, model_cfg, label, trial = args
    if dataset is None:
        dataset = _FORK_DATASET
    try:
        res = finetune(dataset, init, cfg, plan, fold, model_cfg)
    except Exception as exc:
        raise SweepRunError(
            f"finetune failed for model={label} fraction={cfg.fraction} trial={trial} fold={fold}: {exc}"
        ) from exc
    return {
        "model": label,
        "fraction": cfg.fraction,
        "trial": trial,
        "fold": fold,
        "mae": res.mae,
        "sigma": res.sigma,
        "seed": cfg.trial_seed,
        "train_ids": res.train_ids,
        "best_epoch": res.best_epoch,
        "stop_reason": res.stop_reason,
    }


def sweep(
    dataset,
    fractions=DEFAULT_FRACTIONS,
    trials: int = DEFAULT_TRIALS,
    plan: SplitPlan | None = None,
    pretrained=None,
    cfg: FinetuneConfig = FinetuneConfig(),
    model_cfg: ModelConfig = ModelConfig(),
    folds=None,
    workers: int = 1,
    on_row=None,
) -> SweepResult:
    """Fine-tune Base (random extractor) and Ours (pretrained extractor) for
    every fraction x trial x fold."""
    if not fractions:
        raise ValueError("fractions must be non-empty")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    plan = plan or make_splits(dataset, 0)
    folds = tuple(range(N_FOLDS)) if folds is None else tuple(folds)
    state = _extractor_state(pretrained)
    jobs = []
    for fraction in fractions:
        for trial in range(trials):
            run_cfg = replace(cfg, fraction=float(fraction), trial_seed=cfg.trial_seed + trial)
            for fold in folds:
                for label, init in (("base", None), ("ours", state)):
                    jobs.append((dataset, init, run_cfg, plan, fold, model_cfg, label, trial))
    rows = []
    if workers > 1:
        import multiprocessing as mp

        _FORK_DATASET[:] = dataset
        try:
            with ProcessPoolExecutor(workers, mp_context=mp.get_context("fork")) as pool:
                for row in pool.map(_finetune_job, [(None, *job[1:]) for job in jobs]):
                    rows.append(row)
                    if on_row:
                        on_row(row)
        finally:
            _FORK_DATASET.clear()
    else:
        for job in jobs:
            row = _finetune_job(job)
            rows.append(row)
            if on_row:
                on_row(row)
    rows.sort(key=lambda r: (r["model"], r["fraction"], r["trial"], r["fold"]))
    return SweepResult(rows, folds)


def render_table(aggregates: dict) -> str:
    """Metric x model rows against percentage-of-training-data columns."""
    fractions = sorted({f for _, f in aggregates})
    models = [m for m in ("base", "ours") if any(k[0] == m for k in aggregates)]
    header = ["Metric", "Model"] + [f"{100 * f:g}%" for f in fractions]
    lines = [header]
    for metric, name in (("mae", "MAE"), ("sigma", "Sigma")):
        for m in models:
            cells = []
            for f in fractions:
                entry = aggregates.get((m, f))
                cells.append(f"{entry[metric][0]:.4f}" if entry else "-")
            lines.append([name, m.capitalize()] + cells)
    widths = [max(len(row[c]) for row in lines) for c in range(len(header))]
    fmt = lambda row: "| " + " | ".join(s.rjust(w) for s, w in zip(row, widths)) + " |"  # noqa: E731
    rule = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([fmt(lines[0]), rule] + [fmt(r) for r in lines[1:]]) + "\n"


def learning_curves(aggregates: dict) -> dict:
    """{model: {"fraction": [...], "mae_mean": [...], "mae_std": [...], "sigma_mean": ..., "sigma_std": ...}}"""
    out: dict = {}
    for (m, f) in sorted(aggregates):
        e = aggregates[(m, f)]
        c = out.setdefault(m, {k: [] for k in ("fraction", "mae_mean", "mae_std", "sigma_mean", "sigma_std")})
        c["fraction"].append(f)
        c["mae_mean"].append(e["mae"][0])
        c["mae_std"].append(e["mae"][1])
        c["sigma_mean"].append(e["sigma"][0])
        c["sigma_std"].append(e["sigma"][1])
    return out


def plot_learning_curves(aggregates: dict, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = learning_curves(aggregates)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, metric, title in zip(axes, ("mae", "sigma"), ("MAE", "Sigma")):
        for m, c in curves.items():
            x = 100 * np.asarray(c["fraction"])
            mean, std = np.asarray(c[f"{metric}_mean"]), np.asarray(c[f"{metric}_std"])
            ax.plot(x, mean, marker="o", label=m.capitalize())
            ax.fill_between(x, mean - std, mean + std, alpha=0.25)
        ax.set_xlabel("training data (%)")
        ax.set_ylabel(title)
        ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def config_dict(*cfgs) -> dict:
    return {type(c).__name__: asdict(c) for c in cfgs}
