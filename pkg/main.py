import argparse
import logging
import os
import sys
from dataclasses import replace

import trainer
from data_io import DataError, DatasetSpec, Standardizer, TabularDataset, split_series, window_series
from neighbor_graph import build_graph, export_graph
from nn import load_model, save_model
from settings_store import ConfigError, SettingsStore

log = logging.getLogger("umap_mixup")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

MODEL_FILE = "model.bin"
GRAPH_FILE = "graph.txt"
TRAIN_LOG_FILE = "train_log.csv"
BATCH_LOG_FILE = "batch_log.csv"
FOLDS_FILE = "folds.csv"
SUMMARY_FILE = "summary.csv"
EMBEDDINGS_FILE = "embeddings.csv"


def build_parser():
    defaults = SettingsStore().describe_defaults()
    parser = argparse.ArgumentParser(
        prog="umap-mixup",
        description="UMAP Mixup regression: graph building, training, evaluation and benchmarks.",
        epilog="config defaults (override with section.key=value):\n" + defaults,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON settings file (default: settings.json if present)")
    common.add_argument("--seed", type=int, default=None, help="seed for every random choice (train.seed)")
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("--dataset", default=None, help="dataset name from the datasets section, or a CSV path")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    common.add_argument("overrides", nargs="*", metavar="section.key=value", help="config overrides")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("graph", parents=[common], help="build the fuzzy data graph and export it")

    p_train = sub.add_parser("train", parents=[common], help="train one model and persist it")
    p_train.add_argument("--method", default=None, choices=trainer.METHODS)

    p_eval = sub.add_parser("evaluate", parents=[common], help="RMSE of a persisted model on a dataset")
    p_eval.add_argument("--model", default=None, help=f"model file (default: <out>/{MODEL_FILE})")

    p_bench = sub.add_parser("benchmark", parents=[common], help="multi-fold comparison of methods")
    p_bench.add_argument("--methods", default=None, help="comma-separated methods (benchmark.methods)")
    p_bench.add_argument("--folds", type=int, default=None, help="number of folds (benchmark.folds)")
    p_bench.add_argument("--parallel-folds", type=int, default=None, help="worker processes for folds")

    p_export = sub.add_parser("export-embeddings", parents=[common], help="write h(x) for every data point")
    p_export.add_argument("--model", default=None, help=f"model file (default: <out>/{MODEL_FILE})")
    return parser


def load_settings(args) -> SettingsStore:
    store = SettingsStore(args.config or "settings.json", required=args.config is not None).load()
    if args.seed is not None:
        store.set("train.seed", args.seed)
    if args.dataset is not None:
        store.set("data.dataset", args.dataset)
    if getattr(args, "method", None):
        store.set("train.method", args.method)
    if getattr(args, "methods", None):
        store.set("benchmark.methods", list(trainer.parse_methods(args.methods)))
    if getattr(args, "folds", None) is not None:
        store.set("benchmark.folds", args.folds)
    if getattr(args, "parallel_folds", None) is not None:
        store.set("benchmark.parallel_folds", args.parallel_folds)
    return store.apply_overrides(args.overrides)


def resolve_dataset(settings: dict) -> DatasetSpec:
    name = settings["data"]["dataset"]
    if not name:
        raise ConfigError("no dataset given: pass --dataset or set data.dataset")
    return DatasetSpec.resolve(name, settings["datasets"], settings["data"]["target"])


def series_split(spec: DatasetSpec, settings: dict):
    """Train and test windows of a price series plus the train-split scalers."""
    window = settings["data"]["window"]
    prices = spec.load_prices(settings["train"]["seed"])
    train_prices, test_prices = split_series(prices, settings["benchmark"]["series_train_fraction"])
    scalers = (Standardizer.fit_scalar(train_prices, window), Standardizer.fit_scalar(train_prices, 1))
    return (window_series(train_prices, window).as_dataset(),
            window_series(test_prices, window).as_dataset(), scalers)


def all_samples(spec: DatasetSpec, settings: dict) -> TabularDataset:
    if spec.kind == "series":
        prices = spec.load_prices(settings["train"]["seed"])
        return window_series(prices, settings["data"]["window"]).as_dataset()
    return spec.load_tabular(drop_constant=False)


def _out_path(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def cmd_graph(args, settings):
    spec = resolve_dataset(settings)
    if spec.kind == "series":
        data, _, (scaler_x, _) = series_split(spec, settings)
    else:
        data = spec.load_tabular()
        scaler_x = Standardizer.fit(data.features)
    features = scaler_x.transform(data.features)
    graph = build_graph(features, settings["graph"]["k"], settings["graph"]["metric"])
    path = _out_path(args, GRAPH_FILE)
    export_graph(graph, path)
    print(f"N={graph.n} K={graph.k} edges={graph.n_edges} mean_p={graph.mean_weight:.6f}")
    log.info("graph written to %s", path)


def cmd_train(args, settings):
    spec = resolve_dataset(settings)
    config = trainer.TrainConfig.from_settings(settings)
    scaler_x = scaler_y = None
    if spec.kind == "series":
        data, _, (scaler_x, scaler_y) = series_split(spec, settings)
        config = replace(config, model_kind="lstm")
    else:
        data = spec.load_tabular()
    model, report = trainer.train(config, data, scaler_x=scaler_x, scaler_y=scaler_y)
    save_model(model, _out_path(args, MODEL_FILE))
    report.write_log(_out_path(args, TRAIN_LOG_FILE))
    report.write_batch_log(_out_path(args, BATCH_LOG_FILE))
    print(f"{config.method}: {report.epochs} epochs, final total loss {report.total_loss[-1]:.6f}")
    log.info("trained in %.2fs", report.wall_clock)


def _model_path(args):
    return args.model or os.path.join(args.out, MODEL_FILE)


def model_inputs(model, data: TabularDataset) -> TabularDataset:
    """The model's training columns, by name, out of a held-out dataset."""
    if model.feature_names:
        data = data.select(model.feature_names)
    expected = model.scaler_x.mean.shape[0] if model.scaler_x is not None else model.spec.d_x
    if data.d_x != expected:
        raise ValueError(f"model expects d_x={expected}, dataset has d_x={data.d_x}")
    return data


def cmd_evaluate(args, settings):
    spec = resolve_dataset(settings)
    model = load_model(_model_path(args))
    if spec.kind == "series":
        data = series_split(spec, settings)[1]
    else:
        # constant columns of a held-out file are still model inputs
        data = spec.load_tabular(drop_constant=False)
    data = model_inputs(model, data)
    print(f"rmse={trainer.evaluate(model, data):.6f}")


def cmd_benchmark(args, settings):
    spec = resolve_dataset(settings)
    config = trainer.TrainConfig.from_settings(settings)
    options = trainer.BenchmarkOptions.from_settings(settings)
    results, fold_rows = trainer.run_benchmark(spec, settings["benchmark"]["methods"], config, options)
    trainer.write_fold_table(fold_rows, _out_path(args, FOLDS_FILE))
    trainer.write_summary_table(results, _out_path(args, SUMMARY_FILE))
    print(trainer.format_table(results))


def cmd_export_embeddings(args, settings):
    spec = resolve_dataset(settings)
    model = load_model(_model_path(args))
    data = model_inputs(model, all_samples(spec, settings))
    z = model.embed_original(data.features)
    y_cols = ["y"] if data.d_y == 1 else [f"y_{k + 1}" for k in range(data.d_y)]
    header = ["id"] + [f"z_{k + 1}" for k in range(z.shape[1])] + y_cols
    rows = ([i] + [float(v) for v in z[i]] + [float(v) for v in data.targets[i]] for i in range(data.n_samples))
    trainer.write_csv(_out_path(args, EMBEDDINGS_FILE), header, rows)
    print(f"exported {data.n_samples} embeddings of width {z.shape[1]}")


COMMANDS = {
    "graph": cmd_graph,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv=None):
    # 1. Parse arguments and set up logging
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )

    # 2. Layer the configuration: defaults < file < flags < overrides
    try:
        settings = load_settings(args).data
    except (ConfigError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE

    # 3. Run the subcommand
    try:
        COMMANDS[args.command](args, settings)
    except (ConfigError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except trainer.TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except (DataError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
