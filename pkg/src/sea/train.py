"""Training loop, schedules, metrics and diagnostics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .graph import Graph, GraphBatch, SbmConfig, batch, generate_sbm, load_jsonl_dataset
from .model import SeaConfig, SeaModel, build_model, model_forward, trunk_states

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    # data: JSONL paths, or SBM settings (SbmConfig fields minus num_graphs)
    train_path: str | None = None
    val_path: str | None = None
    test_path: str | None = None
    sbm: dict | None = None
    num_train: int = 0
    num_val: int = 0
    num_test: int = 0
    # model
    variant: str = "SEA_GNN"
    num_experts: int = 4
    khop: int = 2
    augmented: bool = False
    aggregate: str = "sum"
    aggregate_mu: str = "mean"
    task: str = "graph_regression"
    num_heads: int = 4
    hidden_dim: int = 32
    lpe_dim: int = 8
    use_lpe: bool = True
    lpe_skip_trivial: bool = False
    use_edge_features: bool = False
    use_bias: bool = False
    include_self: bool = False
    residual: bool = True
    readout: str = "sum"
    dropout: float = 0.0
    epsilon0: float = 0.5
    epsilon_decay: float = 0.9
    epsilon_floor: float = 0.0
    strict: bool = False
    # optimisation
    batch_size: int = 16
    lr: float = 1e-3
    lr_reduce_factor: float = 0.5
    lr_patience: int = 5
    min_lr: float = 1e-6
    max_epochs: int = 500
    eval_every: int = 5
    early_stop_patience: int = 10
    improvement_tol: float = 1e-6
    weight_decay: float = 0.0
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if not 0.0 < self.lr_reduce_factor < 1.0:
            raise ValueError("lr_reduce_factor must lie in (0, 1)")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    metric_name: str
    metric: float
    loss: float
    epoch: int = 0
    split: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


# -- metrics ---------------------------------------------------------------------

def mae(pred, target) -> float:
    pred, target = np.asarray(pred, float).ravel(), np.asarray(target, float).ravel()
    return float(np.mean(np.abs(pred - target)))


def accuracy(pred_labels, labels) -> float:
    pred_labels, labels = np.asarray(pred_labels).ravel(), np.asarray(labels).ravel()
    return float(np.mean(pred_labels == labels))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(tie), via average ranks."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("roc_auc: labels must be binary")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc: both classes must be present")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def class_weights(labels, num_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, np.int64), minlength=num_classes).astype(float)
    n = counts.sum()
    return np.divide(n, num_classes * counts, out=np.zeros(num_classes), where=counts > 0)


METRIC_NAMES = {"graph_regression": "MAE", "graph_binary": "ROC-AUC",
                "node_classification": "accuracy"}
LOWER_IS_BETTER = {"graph_regression": True, "graph_binary": False, "node_classification": False}


def task_loss(pred: ad.Tensor, b: GraphBatch, task: str, num_classes: int = 2) -> ad.Tensor:
    if task == "graph_regression":
        return ad.l1_loss(pred, [g.y_graph for g in b.graphs])
    if task == "graph_binary":
        return ad.bce_with_logits(pred, [g.y_graph for g in b.graphs])
    y = b.graph.y_node
    return ad.weighted_cross_entropy(pred, y, class_weights(y, num_classes))


def _check_task(graphs, task):
    kind = "node" if task == "node_classification" else "graph"
    for g in graphs:
        if g.target_kind != kind:
            raise ValueError(f"dataset/task mismatch: task {task} needs {kind}-level targets")
    if task == "graph_binary" and any(g.y_graph not in (0.0, 1.0) for g in graphs):
        raise ValueError("graph_binary targets must be 0 or 1")


def predict(model: SeaModel, graphs, batch_size: int = 64):
    """Raw predictions (eps = 0) concatenated over the dataset, plus expert choices."""
    preds, choices = [], []
    for start in range(0, len(graphs), batch_size):
        b = batch(graphs[start:start + batch_size], keys=range(start, min(start + batch_size, len(graphs))))
        pred, dec = model_forward(b, model)
        preds.append(pred.data)
        choices.append(dec.choice)
    return np.concatenate(preds), np.concatenate(choices)


def evaluate(model: SeaModel, graphs, task: str | None = None, batch_size: int = 64,
             split: str = "", epoch: int = 0) -> MetricsReport:
    graphs = list(graphs)
    if not graphs:
        raise ValueError("evaluate: empty dataset")
    cfg = model.config
    task = task or cfg.task
    if task != cfg.task:
        raise ValueError(f"task {task} does not match model task {cfg.task}")
    _check_task(graphs, task)
    pred, _ = predict(model, graphs, batch_size)
    if task == "node_classification":
        y = np.concatenate([g.y_node for g in graphs])
        loss = ad.weighted_cross_entropy(ad.Tensor(pred), y, class_weights(y, cfg.num_classes)).item()
        metric = accuracy(pred.argmax(axis=1), y)
    else:
        y = np.array([g.y_graph for g in graphs])
        if task == "graph_regression":
            loss = ad.l1_loss(ad.Tensor(pred), y).item()
            metric = mae(pred, y)
        else:
            loss = ad.bce_with_logits(ad.Tensor(pred), y).item()
            metric = roc_auc(pred[:, 0], y)
    return MetricsReport(METRIC_NAMES[task], metric, loss, epoch, split)


# -- diagnostics --------------------------------------------------------------------

@dataclass
class ExpertReport:
    frequencies: np.ndarray
    counts: np.ndarray
    shown: dict            # expert -> frequency, only those at or above threshold
    collapse: bool
    threshold: float = 0.01

    def to_dict(self) -> dict:
        return {"frequencies": self.frequencies.tolist(), "counts": self.counts.tolist(),
                "shown": {str(k): v for k, v in self.shown.items()},
                "collapse": self.collapse, "threshold": self.threshold}


def expert_distribution_report(choices, num_experts: int, threshold: float = 0.01,
                               collapse_at: float = 0.95) -> ExpertReport:
    choices = np.asarray(choices, dtype=np.int64).ravel()
    if not len(choices):
        raise ValueError("expert_distribution_report: no routing decisions")
    counts = np.bincount(choices, minlength=num_experts)
    freq = counts / counts.sum()
    shown = {i: float(f) for i, f in enumerate(freq) if f >= threshold}
    return ExpertReport(freq, counts, shown, bool(freq.max() >= collapse_at), threshold)


def mean_pairwise_cosine(x: np.ndarray) -> tuple[float, int, int]:
    """Mean cosine over unordered node pairs; pairs touching a zero row are excluded.

    Returns ``(mean, used_pairs, excluded_pairs)``; mean is nan if nothing is left.
    """
    n = len(x)
    norms = np.linalg.norm(x, axis=1)
    ok = norms > 0
    k = int(ok.sum())
    total = n * (n - 1) // 2
    used = k * (k - 1) // 2
    if used == 0:
        return float("nan"), 0, total
    u = x[ok] / norms[ok, None]
    sim = u @ u.T
    iu = np.triu_indices(k, 1)
    return float(sim[iu].mean()), used, total - used


def oversmoothing_diagnostic(model: SeaModel, graph: Graph) -> list[dict]:
    states = trunk_states(batch([graph]), model)
    rows = []
    for layer, x in enumerate(states):
        m, used, excl = mean_pairwise_cosine(x)
        rows.append({"layer": layer, "mean_cosine": m, "pairs": used, "excluded": excl})
    return rows


# -- schedules ------------------------------------------------------------------------

class PlateauScheduler:
    """Multiply lr by ``factor`` once ``patience`` consecutive epochs fail to
    improve the best validation loss by at least ``tol``."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 5, tol: float = 1e-6):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.tol = tol
        self.best = math.inf
        self.bad = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.tol:
            self.best = val_loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr *= self.factor
                self.bad = 0
        return self.lr


class EarlyStopper:
    def __init__(self, patience: int = 10, lower_is_better: bool = True, tol: float = 1e-6):
        self.patience = patience
        self.sign = 1.0 if lower_is_better else -1.0
        self.tol = tol
        self.best = math.inf
        self.bad = 0

    def step(self, metric: float) -> bool:
        """Record one evaluation; True means stop."""
        v = self.sign * metric
        if v < self.best - self.tol:
            self.best = v
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


# -- data ---------------------------------------------------------------------------------

def load_splits(cfg: TrainConfig):
    if cfg.sbm is not None:
        total = cfg.num_train + cfg.num_val + cfg.num_test
        graphs = generate_sbm(SbmConfig(num_graphs=total, **cfg.sbm))
        a, b_ = cfg.num_train, cfg.num_train + cfg.num_val
        return graphs[:a], graphs[a:b_], graphs[b_:]
    if not (cfg.train_path and cfg.test_path):
        raise ValueError("config needs train_path and test_path, or sbm settings")
    train = load_jsonl_dataset(cfg.train_path)
    test = load_jsonl_dataset(cfg.test_path)
    val = load_jsonl_dataset(cfg.val_path) if cfg.val_path else test
    return train, val, test


def model_config_for(cfg: TrainConfig, graphs) -> SeaConfig:
    g0 = graphs[0]
    names = {f.name for f in fields(SeaConfig)}
    kw = {k: v for k, v in cfg.to_dict().items() if k in names}
    if g0.uses_tokens:
        kw["node_vocab"] = int(max(int(g.node_feat.max()) if g.num_nodes else 0 for g in graphs)) + 1
        if cfg.sbm is not None:
            kw["node_vocab"] = max(kw["node_vocab"], int(cfg.sbm.get("feature_vocab", 3)))
    else:
        kw["node_in_dim"] = g0.feature_dim
    if cfg.use_edge_features and g0.edge_feat is not None:
        ef = np.asarray(g0.edge_feat)
        if ef.dtype.kind in "iu":
            kw["edge_vocab"] = int(max(int(g.edge_feat.max()) if len(g.edge_feat) else 0
                                       for g in graphs)) + 1
        else:
            kw["edge_in_dim"] = 1 if ef.ndim == 1 else ef.shape[1]
    if cfg.task == "node_classification":
        kw["num_classes"] = int(max(int(g.y_node.max()) for g in graphs if g.num_nodes)) + 1
        kw["num_classes"] = max(kw["num_classes"], 2)
    return SeaConfig(**kw)


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed & (2**63 - 1), epoch]).generate_state(1)[0])


# -- training ------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SeaModel
    log: list = field(default_factory=list)          # one JSON string per epoch
    best: dict = field(default_factory=dict)
    expert_report: ExpertReport | None = None
    oversmoothing: list = field(default_factory=list)
    test_report: MetricsReport | None = None
    stop_reason: str = ""


def _checkpoint_meta(model: SeaModel, cfg: TrainConfig, epoch: int) -> dict:
    return {"model_config": model.config.to_dict(), "train_config": cfg.to_dict(), "epoch": epoch}


def train_step(model: SeaModel, b: GraphBatch, state: ad.AdamState, epsilon: float,
               seed: int, rng=None):
    cfg = model.config
    with ad.Tape() as tape:
        pred, dec = model_forward(b, model, epsilon=epsilon, seed=seed, rng=rng)
        loss = task_loss(pred, b, cfg.task, cfg.num_classes)
    if not math.isfinite(loss.item()):
        raise FloatingPointError("non-finite training loss")
    names = list(model.params)
    grads = ad.backward(tape, loss, wrt=[model.params[k] for k in names])
    ad.adam_step(model.params, {k: grads[model.params[k]] for k in names}, state)
    return loss.item(), dec


def train(cfg: TrainConfig, splits=None) -> TrainResult:
    train_set, val_set, test_set = splits if splits is not None else load_splits(cfg)
    if not train_set:
        raise ValueError("empty training set")
    for part in (train_set, val_set, test_set):
        _check_task(part, cfg.task)
    model = build_model(model_config_for(cfg, list(train_set) + list(val_set) + list(test_set)), cfg.seed)
    mcfg = model.config
    state = ad.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(cfg.lr, cfg.lr_reduce_factor, cfg.lr_patience, cfg.improvement_tol)
    stopper = EarlyStopper(cfg.early_stop_patience, LOWER_IS_BETTER[cfg.task], cfg.improvement_tol)
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model)
    best_val = None
    lower = LOWER_IS_BETTER[cfg.task]

    for epoch in range(1, cfg.max_epochs + 1):
        eseed = _epoch_seed(cfg.seed, epoch)
        order_rng = np.random.default_rng(eseed)
        drop_rng = np.random.default_rng(eseed + 1) if cfg.dropout > 0 else None
        eps = mcfg.epsilon(epoch - 1)
        order = order_rng.permutation(len(train_set))
        losses, weights, choices = [], [], []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            b = batch([train_set[i] for i in idx], keys=idx)
            loss, dec = train_step(model, b, state, eps, eseed, drop_rng)
            losses.append(loss)
            weights.append(len(idx))
            choices.append(dec.choice)
        train_loss = float(np.average(losses, weights=weights))
        freq = expert_distribution_report(np.concatenate(choices), mcfg.num_experts).frequencies

        val = evaluate(model, val_set, cfg.task, split="val", epoch=epoch)
        new_lr = sched.step(val.loss)
        state.lr = new_lr
        entry = {"epoch": epoch, "lr": state.lr, "epsilon": eps, "train_loss": train_loss,
                 "val_loss": val.loss, "val_metric": val.metric}

        if best_val is None or (val.metric < best_val - cfg.improvement_tol if lower
                                else val.metric > best_val + cfg.improvement_tol):
            best_val = val.metric
            result.best = {"epoch": epoch, "val_metric": val.metric, "val_loss": val.loss}
            if out_dir:
                ad.save_checkpoint(out_dir / "best.json", model.params, _checkpoint_meta(model, cfg, epoch))

        stop = ""
        if epoch % cfg.eval_every == 0:
            test = evaluate(model, test_set, cfg.task, split="test", epoch=epoch)
            entry["test_loss"] = test.loss
            entry["test_metric"] = test.metric
            if stopper.step(test.metric):
                stop = "early_stop"
        entry["expert_freq"] = freq.tolist()
        result.log.append(json.dumps(entry))
        log.info("epoch %d lr %.2e train %.4f val %.4f", epoch, state.lr, train_loss, val.loss)
        if not stop and state.lr < cfg.min_lr:
            stop = "min_lr"
        if stop:
            result.stop_reason = stop
            break
    else:
        result.stop_reason = "max_epochs"

    result.test_report = evaluate(model, test_set, cfg.task, split="test", epoch=epoch)
    _, test_choices = predict(model, test_set)
    result.expert_report = expert_distribution_report(test_choices, mcfg.num_experts)
    result.oversmoothing = oversmoothing_diagnostic(model, test_set[0])
    if out_dir:
        ad.save_checkpoint(out_dir / "last.json", model.params, _checkpoint_meta(model, cfg, epoch))
        with open(out_dir / "train_log.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(line + "\n" for line in result.log)
        with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
            json.dump({"stop_reason": result.stop_reason, "best": result.best,
                       "test": result.test_report.to_dict(),
                       "experts": result.expert_report.to_dict(),
                       "oversmoothing": result.oversmoothing}, fh, indent=2)
    return result


def load_model(path) -> SeaModel:
    params, meta = ad.load_checkpoint(path)
    if "model_config" not in meta:
        raise ValueError(f"{path}: checkpoint carries no model_config")
    return SeaModel(SeaConfig.from_dict(meta["model_config"]), params)
