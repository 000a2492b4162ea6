"""Per-method objectives, the epoch loop, RMSE evaluation and the fold benchmark.

Randomness inside one training run comes from a single Generator and is
consumed in a fixed order every epoch: pair sampling (graph edges or uniform
partners), then the Beta(alpha, alpha) draws, then the batch shuffle. Model
initialization uses a separate stream spawned from the same seed.
"""

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
import edge_sampler
import umap_loss
from data_io import DatasetSpec, Standardizer, TabularDataset, split_folds, split_series, window_series
from mixup_engine import MixedPair, input_mixup_forward, manifold_mixup_forward, mix_embedded, mixed_loss
from neighbor_graph import DataGraph, build_graph
from nn import Adam, ModelSpec, SplitModel, sample_lambda

log = logging.getLogger(__name__)

METHODS = ("erm", "mixup", "manifold_mixup", "umap_mixup", "supervised_umap")
MIXUP_METHODS = ("mixup", "manifold_mixup", "umap_mixup")
REGULARIZED_METHODS = ("umap_mixup", "supervised_umap")
PAIR_SAMPLING = ("uniform", "graph")
DEFAULT_EPOCHS = {"mlp": 400, "lstm": 150}
METHOD_LABELS = {
    "erm": "ERM",
    "mixup": "Mixup",
    "manifold_mixup": "Manifold Mixup",
    "umap_mixup": "UMAP Mixup",
    "supervised_umap": "Supervised UMAP",
}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float = float("nan")):
        super().__init__(f"training diverged at epoch {epoch} (total loss {loss})")
        self.epoch = epoch
        self.loss = loss

    def __reduce__(self):
        return TrainingDiverged, (self.epoch, self.loss)


def parse_methods(value) -> Tuple[str, ...]:
    names = value.split(",") if isinstance(value, str) else list(value)
    methods = tuple(n.strip() for n in names if n.strip())
    unknown = [m for m in methods if m not in METHODS]
    if unknown or not methods:
        raise ValueError(f"unknown method(s) {unknown or [value]}, expected a subset of {METHODS}")
    return methods


@dataclass(frozen=True)
class TrainConfig:
    method: str = "umap_mixup"
    alpha: float = 2.0
    gamma: float = 0.1
    k: int = 15
    metric: str = "euclidean"
    negatives: int = edge_sampler.DEFAULT_NEGATIVES
    min_dist: float = 0.1
    spread: float = 1.0
    a: Optional[float] = None
    b: Optional[float] = None
    lr: float = 1e-3
    batch_size: int = 32
    epochs: Optional[int] = None
    seed: int = 0
    loss: str = "squared_error"
    pair_sampling: str = "uniform"
    fixed_lambda: Optional[float] = None
    model_kind: str = "mlp"
    hidden: Tuple[int, ...] = (100, 50)
    activation: str = "relu"
    lstm_hidden: int = 64
    head_hidden: Tuple[int, ...] = ()
    log_every: int = 50

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.method in MIXUP_METHODS and self.fixed_lambda is None and not self.alpha > 0.0:
            raise ValueError(f"alpha must be > 0 for {self.method}, got {self.alpha}")
        if self.fixed_lambda is not None and not 0.0 <= self.fixed_lambda <= 1.0:
            raise ValueError(f"fixed_lambda must lie in [0, 1], got {self.fixed_lambda}")
        if self.pair_sampling not in PAIR_SAMPLING:
            raise ValueError(f"unknown pair_sampling {self.pair_sampling!r}, expected one of {PAIR_SAMPLING}")
        if self.model_kind not in DEFAULT_EPOCHS:
            raise ValueError(f"unknown model kind {self.model_kind!r}, expected one of {tuple(DEFAULT_EPOCHS)}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.negatives < 1:
            raise ValueError(f"M must be >= 1, got {self.negatives}")
        if not self.lr > 0.0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        object.__setattr__(self, "head_hidden", tuple(int(w) for w in self.head_hidden))

    @classmethod
    def from_settings(cls, settings: dict, **overrides) -> "TrainConfig":
        graph, umap, model, train_ = settings["graph"], settings["umap"], settings["model"], settings["train"]
        values = dict(
            method=train_["method"],
            alpha=train_["alpha"],
            gamma=train_["gamma"],
            lr=train_["lr"],
            batch_size=train_["batch_size"],
            epochs=train_["epochs"],
            seed=train_["seed"],
            loss=train_["loss"],
            pair_sampling=train_["pair_sampling"],
            fixed_lambda=train_["fixed_lambda"],
            log_every=train_["log_every"],
            k=graph["k"],
            metric=graph["metric"],
            negatives=umap["negatives"],
            min_dist=umap["min_dist"],
            spread=umap["spread"],
            a=umap["a"],
            b=umap["b"],
            model_kind=model["kind"],
            hidden=model["hidden"],
            activation=model["activation"],
            lstm_hidden=model["lstm_hidden"],
            head_hidden=model["head_hidden"],
        )
        values.update(overrides)
        return cls(**values)

    @property
    def n_epochs(self) -> int:
        return self.epochs if self.epochs is not None else DEFAULT_EPOCHS[self.model_kind]

    @property
    def regularized(self) -> bool:
        return self.method in REGULARIZED_METHODS

    @property
    def uses_graph(self) -> bool:
        if self.regularized:
            return True
        return self.method in MIXUP_METHODS and self.pair_sampling == "graph"

    def model_spec(self, d_x: int, d_y: int) -> ModelSpec:
        return ModelSpec(
            d_x=d_x,
            d_y=d_y,
            kind=self.model_kind,
            hidden=self.hidden,
            activation=self.activation,
            lstm_hidden=self.lstm_hidden,
            head_hidden=self.head_hidden,
        )

    def kernel(self) -> umap_loss.KernelParams:
        return umap_loss.kernel_params(self.a, self.b, self.min_dist, self.spread)


@dataclass(frozen=True)
class BatchRecord:
    epoch: int
    batch: int
    supervised: float
    umap: float
    gamma: float
    total: float


@dataclass(eq=False)
class TrainReport:
    method: str
    supervised_loss: List[float] = field(default_factory=list)
    umap_loss: List[float] = field(default_factory=list)
    total_loss: List[float] = field(default_factory=list)
    batches: List[BatchRecord] = field(default_factory=list)
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    graph_checksum: str = ""
    wall_clock: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.total_loss)

    def same_run(self, other: "TrainReport") -> bool:
        """Bit-level equality of everything except wall-clock."""
        if (self.method, self.supervised_loss, self.umap_loss, self.total_loss, self.batches) != (
                other.method, other.supervised_loss, other.umap_loss, other.total_loss, other.batches):
            return False
        if self.params.keys() != other.params.keys():
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in self.params)

    def write_log(self, path) -> None:
        rows = zip(range(self.epochs), self.supervised_loss, self.umap_loss, self.total_loss)
        write_csv(path, ("epoch", "supervised", "umap", "total"), rows)

    def write_batch_log(self, path) -> None:
        rows = ((r.epoch, r.batch, r.supervised, r.umap, r.gamma, r.total) for r in self.batches)
        write_csv(path, ("epoch", "batch", "supervised", "umap", "gamma", "total"), rows)


class Trainer:
    """One sequential training run of a SplitModel on standardized arrays."""

    def __init__(self, config: TrainConfig, model: SplitModel, graph: Optional[DataGraph],
                 rng: np.random.Generator):
        if config.uses_graph and graph is None:
            raise ValueError(f"{config.method} needs a data graph")
        self.config = config
        self.model = model
        self.graph = graph
        self.rng = rng
        self.optimizer = Adam(model.params, lr=config.lr)
        self.kernel = config.kernel() if config.regularized else None

    def fit(self, x: np.ndarray, y: np.ndarray) -> TrainReport:
        cfg = self.config
        report = TrainReport(method=cfg.method)
        started = time.perf_counter()
        n_epochs = cfg.n_epochs
        for epoch in range(n_epochs):
            records = self._edge_epoch(epoch, x, y) if cfg.uses_graph else self._uniform_epoch(epoch, x, y)
            if records:
                sup = float(np.mean([r.supervised for r in records]))
                reg = float(np.mean([r.umap for r in records]))
                total = float(np.mean([r.total for r in records]))
            else:
                log.warning("epoch %d: no positive edges sampled, parameters unchanged", epoch)
                sup = reg = total = 0.0
            report.supervised_loss.append(sup)
            report.umap_loss.append(reg)
            report.total_loss.append(total)
            report.batches.extend(records)
            if cfg.log_every and ((epoch + 1) % cfg.log_every == 0 or epoch == n_epochs - 1):
                log.info("%s epoch %d/%d: supervised=%.5f umap=%.5f total=%.5f",
                         cfg.method, epoch + 1, n_epochs, sup, reg, total)
        report.params = {name: p.data.copy() for name, p in self.model.params.items()}
        report.wall_clock = time.perf_counter() - started
        log.debug("%s finished %d epochs in %.2fs", cfg.method, n_epochs, report.wall_clock)
        return report

    def _draw_lambda(self, size: int) -> np.ndarray:
        if self.config.fixed_lambda is not None:
            return np.full(size, float(self.config.fixed_lambda))
        return sample_lambda(self.config.alpha, self.rng, size)

    def _uniform_epoch(self, epoch: int, x: np.ndarray, y: np.ndarray) -> List[BatchRecord]:
        cfg = self.config
        n = x.shape[0]
        mixing = cfg.method in MIXUP_METHODS
        partners = self.rng.integers(0, n, size=n) if mixing else None
        lam = self._draw_lambda(n) if mixing else None
        order = self.rng.permutation(n)

        def objective(idx):
            if not mixing:
                return mixed_loss(self.model.predict(x[idx]), y[idx], y[idx], 1.0, cfg.loss), None
            pair = MixedPair.make(idx, partners[idx], lam[idx], y[idx], y[partners[idx]])
            forward = input_mixup_forward if cfg.method == "mixup" else manifold_mixup_forward
            return pair.loss(forward(self.model, x[pair.i], x[pair.j], pair.lam), cfg.loss), None

        records = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            records.append(self._step(epoch, b, lambda idx=idx: objective(idx)))
        return records

    def _edge_epoch(self, epoch: int, x: np.ndarray, y: np.ndarray) -> List[BatchRecord]:
        cfg = self.config
        sampled = edge_sampler.sample_epoch(self.graph, cfg.negatives, self.rng)
        if sampled.n_positives == 0:
            return []
        lam = self._draw_lambda(sampled.n_positives) if cfg.method in MIXUP_METHODS else None
        records = []
        for b, batch in enumerate(edge_sampler.batches(sampled, cfg.batch_size, self.rng)):
            records.append(self._step(epoch, b, lambda batch=batch: self._edge_objective(batch, x, y, lam)))
        return records

    def _edge_objective(self, batch: edge_sampler.EdgeBatch, x, y, lam):
        cfg = self.config
        src, dst = batch.positives[:, 0], batch.positives[:, 1]
        if cfg.method == "mixup":
            pair = MixedPair.make(src, dst, lam[batch.positive_ids], y[src], y[dst])
            return pair.loss(input_mixup_forward(self.model, x[src], x[dst], pair.lam), cfg.loss), None

        # one embedding pass over the batch vertices feeds both terms
        z = self.model.embed(x[batch.vertices])
        z_src = z.take(batch.local_positives[:, 0])
        if cfg.method == "supervised_umap":
            supervised = mixed_loss(self.model.head(z_src), y[src], y[src], 1.0, cfg.loss)
        else:
            pair = MixedPair.make(src, dst, lam[batch.positive_ids], y[src], y[dst])
            pred = mix_embedded(self.model, z_src, z.take(batch.local_positives[:, 1]), pair.lam)
            supervised = pair.loss(pred, cfg.loss)
        if not cfg.regularized:
            return supervised, None
        return supervised, umap_loss.cross_entropy_batch(self.graph, batch, z, self.kernel)

    def _step(self, epoch: int, index: int, objective: Callable) -> BatchRecord:
        gamma = self.config.gamma
        with ad.Graph() as tape:
            supervised, reg = objective()
            total = supervised if reg is None else supervised + reg * gamma
        value = total.item()
        if not np.isfinite(value):
            raise TrainingDiverged(epoch, value)
        grads = tape.backward(total)
        try:
            self.optimizer.step(grads)
        except FloatingPointError as exc:
            raise TrainingDiverged(epoch, value) from exc
        if reg is None:
            return BatchRecord(epoch, index, supervised.item(), 0.0, 0.0, value)
        return BatchRecord(epoch, index, supervised.item(), reg.item(), gamma, value)


def train(config: TrainConfig, data: TabularDataset, graph: Optional[DataGraph] = None,
          scaler_x: Optional[Standardizer] = None, scaler_y: Optional[Standardizer] = None
          ) -> Tuple[SplitModel, TrainReport]:
    """Standardize on ``data``, build the graph if the method needs one, and train.

    Scalers and a prebuilt graph may be passed in so a benchmark fold shares
    them across methods; both must come from this same training split.
    """
    if data.n_samples == 0:
        raise ValueError("train: empty training set")
    if scaler_x is None:
        scaler_x = Standardizer.fit(data.features)
    if scaler_y is None:
        scaler_y = Standardizer.fit(data.targets)
    x = scaler_x.transform(data.features)
    y = scaler_y.transform(data.targets)

    if config.uses_graph:
        if graph is None:
            if data.n_samples <= config.k:
                raise ValueError(f"K must be < N (K={config.k}, N={data.n_samples})")
            graph = build_graph(x, config.k, config.metric)
        elif graph.n != data.n_samples:
            raise ValueError(f"graph has {graph.n} points, training set has {data.n_samples}")

    init_seq, run_seq = np.random.SeedSequence(config.seed).spawn(2)
    step_width = 1 if config.model_kind == "lstm" else data.d_x
    model = SplitModel.init(config.model_spec(step_width, data.d_y), np.random.default_rng(init_seq))
    model.scaler_x, model.scaler_y = scaler_x, scaler_y
    model.feature_names = list(data.feature_names)

    trainer = Trainer(config, model, graph if config.uses_graph else None, np.random.default_rng(run_seq))
    report = trainer.fit(x, y)
    if config.uses_graph:
        report.graph_checksum = graph.source_checksum
    return model, report


def rmse(predictions: np.ndarray, targets: np.ndarray) -> float:
    predictions = np.asarray(predictions, dtype=np.float64).reshape(len(targets), -1)
    targets = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)
    if targets.shape[0] == 0:
        raise ValueError("rmse: empty test set")
    return float(np.sqrt(np.mean(np.sum((predictions - targets) ** 2, axis=1))))


def evaluate(model, data: TabularDataset) -> float:
    """RMSE in original target units."""
    if data.n_samples == 0:
        raise ValueError("evaluate: empty test set")
    return rmse(model.predict_original(data.features), data.targets)


# --- benchmark ---

@dataclass(frozen=True)
class FoldResult:
    dataset: str
    method: str
    fold: int
    rmse: float


@dataclass(frozen=True)
class BenchmarkResult:
    dataset: str
    method: str
    rmses: Tuple[float, ...]
    mean: float
    std: float

    @classmethod
    def from_folds(cls, dataset: str, method: str, rmses: Sequence[float]) -> "BenchmarkResult":
        """Mean and sample std (n - 1) over folds; one fold has std 0."""
        values = np.asarray(rmses, dtype=np.float64)
        if values.size == 0:
            raise ValueError(f"{dataset} {method}: no fold results")
        std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        return cls(dataset=dataset, method=method, rmses=tuple(float(v) for v in values),
                   mean=float(np.mean(values)), std=std)

    @property
    def folds(self) -> int:
        return len(self.rmses)

    def cell(self) -> str:
        return f"{self.mean:.2f} ± {self.std:.2f}"


@dataclass(frozen=True)
class BenchmarkOptions:
    folds: int = 20
    test_fraction: float = 0.1
    series_train_fraction: float = 0.8
    series_repeats: int = 5
    window: int = 60
    parallel_folds: int = 1

    @classmethod
    def from_settings(cls, settings: dict, **overrides) -> "BenchmarkOptions":
        bench, data = settings["benchmark"], settings["data"]
        values = dict(
            folds=bench["folds"],
            test_fraction=bench["test_fraction"],
            series_train_fraction=bench["series_train_fraction"],
            series_repeats=bench["series_repeats"],
            parallel_folds=bench["parallel_folds"],
            window=data["window"],
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _needs_graph(config: TrainConfig, methods: Sequence[str]) -> bool:
    return any(replace(config, method=m).uses_graph for m in methods)


def run_tabular_fold(name: str, data: TabularDataset, methods: Sequence[str], config: TrainConfig, fold: int,
                     train_idx: np.ndarray, test_idx: np.ndarray) -> List[FoldResult]:
    train_set, test_set = data.subset(train_idx), data.subset(test_idx)
    scaler_x = Standardizer.fit(train_set.features)
    scaler_y = Standardizer.fit(train_set.targets)
    graph = None
    if _needs_graph(config, methods):
        graph = build_graph(scaler_x.transform(train_set.features), config.k, config.metric)
    return _train_methods(name, methods, config, fold, train_set, test_set, graph, scaler_x, scaler_y)


def run_series_repeat(name: str, prices: np.ndarray, methods: Sequence[str], config: TrainConfig, repeat: int,
                      options: BenchmarkOptions) -> List[FoldResult]:
    train_prices, test_prices = split_series(prices, options.series_train_fraction)
    train_set = window_series(train_prices, options.window).as_dataset()
    test_set = window_series(test_prices, options.window).as_dataset()
    scaler_x = Standardizer.fit_scalar(train_prices, options.window)
    scaler_y = Standardizer.fit_scalar(train_prices, 1)
    config = replace(config, model_kind="lstm")
    graph = None
    if _needs_graph(config, methods):
        graph = build_graph(scaler_x.transform(train_set.features), config.k, config.metric)
    return _train_methods(name, methods, config, repeat, train_set, test_set, graph, scaler_x, scaler_y)


def _train_methods(name, methods, config, fold, train_set, test_set, graph, scaler_x, scaler_y) -> List[FoldResult]:
    results = []
    for method in methods:
        cfg = replace(config, method=method, seed=fold_seed(config.seed, fold))
        model, _ = train(cfg, train_set, graph if cfg.uses_graph else None, scaler_x, scaler_y)
        score = evaluate(model, test_set)
        log.info("%s fold %d %s: rmse=%.4f", name, fold, method, score)
        results.append(FoldResult(name, method, fold, score))
    return results


def run_benchmark(spec: DatasetSpec, methods: Sequence[str], config: TrainConfig,
                  options: BenchmarkOptions = BenchmarkOptions()
                  ) -> Tuple[List[BenchmarkResult], List[FoldResult]]:
    """Train every method on every fold and aggregate test RMSE as mean ± std.

    Tabular datasets use independent seeded shuffle-splits; price series use
    one chronological split and vary only the model seed across repeats.
    """
    methods = parse_methods(methods)
    if spec.kind == "series":
        prices = spec.load_prices(config.seed)
        tasks = [(run_series_repeat, (spec.name, prices, methods, config, r, options))
                 for r in range(options.series_repeats)]
    else:
        data = spec.load_tabular()
        splits = split_folds(data.n_samples, options.folds, options.test_fraction, config.seed)
        tasks = [(run_tabular_fold, (spec.name, data, methods, config, f, tr, te))
                 for f, (tr, te) in enumerate(splits)]
    log.info("benchmark %s: %d folds x %d methods", spec.name, len(tasks), len(methods))

    fold_rows = _execute(tasks, options.parallel_folds)
    fold_rows.sort(key=lambda r: (methods.index(r.method), r.fold))
    results = [BenchmarkResult.from_folds(spec.name, m, [r.rmse for r in fold_rows if r.method == m])
               for m in methods]
    for res in results:
        log.info("%s %s: %s over %d folds", res.dataset, res.method, res.cell(), res.folds)
    return results, fold_rows


def _execute(tasks, workers: int) -> List[FoldResult]:
    rows: List[FoldResult] = []
    if workers <= 1 or len(tasks) <= 1:
        for fn, args in tasks:
            rows.extend(fn(*args))
        return rows
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *args) for fn, args in tasks]
        for future in futures:
            rows.extend(future.result())
    return rows


# --- result tables ---

def write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_fold_table(rows: Sequence[FoldResult], path) -> None:
    write_csv(path, ("dataset", "method", "fold", "rmse"), ((r.dataset, r.method, r.fold, r.rmse) for r in rows))


def write_summary_table(results: Sequence[BenchmarkResult], path) -> None:
    write_csv(path, ("dataset", "method", "mean", "std"), ((r.dataset, r.method, r.mean, r.std) for r in results))


def format_table(results: Sequence[BenchmarkResult]) -> str:
    """Datasets as rows, methods as columns, ``mean ± std`` cells."""
    datasets = list(dict.fromkeys(r.dataset for r in results))
    methods = list(dict.fromkeys(r.method for r in results))
    cells = {(r.dataset, r.method): r.cell() for r in results}
    header = ["dataset"] + [METHOD_LABELS[m] for m in methods]
    body = [[d] + [cells.get((d, m), "-") for m in methods] for d in datasets]
    widths = [max(len(row[c]) for row in [header] + body) for c in range(len(header))]
    return "\n".join(" | ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in [header] + body)
