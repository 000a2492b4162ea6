import copy
import json
import os

DEFAULT_SETTINGS = {
    "graph": {
        "k": 15,
        "metric": "euclidean",
    },
    "umap": {
        "negatives": 5,
        "min_dist": 0.1,
        "spread": 1.0,
        "a": None,
        "b": None,
    },
    "model": {
        "kind": "mlp",
        "hidden": [100, 50],
        "activation": "relu",
        "lstm_hidden": 64,
        "head_hidden": [],
    },
    "train": {
        "method": "umap_mixup",
        "alpha": 2.0,
        "gamma": 0.1,
        "lr": 1e-3,
        "batch_size": 32,
        "epochs": None,
        "seed": 0,
        "loss": "squared_error",
        "pair_sampling": "uniform",
        "fixed_lambda": None,
        "log_every": 50,
    },
    "benchmark": {
        "methods": ["erm", "mixup", "manifold_mixup", "umap_mixup"],
        "folds": 20,
        "test_fraction": 0.1,
        "series_train_fraction": 0.8,
        "series_repeats": 5,
        "parallel_folds": 1,
    },
    "data": {
        "dataset": None,
        "target": None,
        "window": 60,
    },
    "datasets": {
        "boston": {"path": "data/boston.csv", "target": "MEDV"},
        "concrete": {"path": "data/concrete.csv", "target": "strength"},
        "yacht": {"path": "data/yacht.csv", "target": "resistance"},
        "trend": {"kind": "series", "synthetic": "trend", "length": 1500},
        "shock": {"kind": "series", "synthetic": "shock", "length": 1500},
        "high_vol": {"kind": "series", "synthetic": "high_vol", "length": 1500},
    },
}

# free-form section: dataset name -> DatasetSpec fields
DATASET_FIELDS = ("kind", "path", "target", "column", "synthetic", "length")


class ConfigError(ValueError):
    pass


def _deep_update(dst, src):
    for key, val in src.items():
        if isinstance(val, dict) and isinstance(dst.get(key), dict):
            _deep_update(dst[key], val)
        else:
            dst[key] = val


def _coerce(default, value, where):
    if isinstance(default, bool) or default is None or value is None:
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, (int, float)) and not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{where}: expected a list, got {value!r}")
    return value


def parse_value(raw: str):
    """JSON literal if it parses, otherwise the bare string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _check_dataset(name, entry):
    if not isinstance(entry, dict):
        raise ConfigError(f"datasets.{name}: expected an object")
    unknown = sorted(set(entry) - set(DATASET_FIELDS))
    if unknown:
        raise ConfigError(f"datasets.{name}: unknown key(s) {unknown}, expected some of {list(DATASET_FIELDS)}")


def validate(incoming: dict) -> dict:
    if not isinstance(incoming, dict):
        raise ConfigError("settings file must hold a JSON object")
    checked = {}
    for section, values in incoming.items():
        if section not in DEFAULT_SETTINGS:
            raise ConfigError(f"unknown config section {section!r}, expected one of {sorted(DEFAULT_SETTINGS)}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        if section == "datasets":
            for name, entry in values.items():
                _check_dataset(name, entry)
            checked[section] = values
            continue
        defaults = DEFAULT_SETTINGS[section]
        checked[section] = {}
        for key, value in values.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {section}.{key}, expected one of {sorted(defaults)}")
            checked[section][key] = _coerce(defaults[key], value, f"{section}.{key}")
    return checked


class SettingsStore:
    def __init__(self, path="settings.json", required=False):
        self.path = path
        self.required = required
        self.data = copy.deepcopy(DEFAULT_SETTINGS)

    def load(self):
        if not os.path.exists(self.path):
            if self.required:
                raise ConfigError(f"config file not found: {self.path}")
            return self
        try:
            with open(self.path, "r", encoding="utf-8") as fh:
                incoming = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{self.path}: cannot read config ({exc})") from None
        _deep_update(self.data, validate(incoming))
        return self

    def set(self, dotted: str, value):
        parts = dotted.split(".")
        if len(parts) == 1:
            parts = [self._section_of(parts[0]), parts[0]]
        section = parts[0]
        if section == "datasets":
            if len(parts) != 3:
                raise ConfigError(f"dataset override must look like datasets.<name>.<key>, got {dotted!r}")
            _check_dataset(parts[1], {parts[2]: value})
            self.data["datasets"].setdefault(parts[1], {})[parts[2]] = value
            return
        if len(parts) != 2:
            raise ConfigError(f"override key must look like section.key, got {dotted!r}")
        _deep_update(self.data, validate({section: {parts[1]: value}}))

    def apply_overrides(self, items):
        for item in items:
            key, sep, raw = item.partition("=")
            if not sep or not key.strip():
                raise ConfigError(f"override {item!r} is not key=value")
            self.set(key.strip(), parse_value(raw.strip()))
        return self

    def _section_of(self, key):
        owners = [s for s, values in DEFAULT_SETTINGS.items() if s != "datasets" and key in values]
        if not owners:
            raise ConfigError(f"unknown config key {key!r}")
        if len(owners) > 1:
            raise ConfigError(f"config key {key!r} is ambiguous, qualify it as one of {[f'{s}.{key}' for s in owners]}")
        return owners[0]

    def describe_defaults(self):
        """One ``section.key=value`` line per scalar default, for --help."""
        lines = []
        for section, values in DEFAULT_SETTINGS.items():
            if section == "datasets":
                continue
            for key, value in values.items():
                lines.append(f"  {section}.{key}={json.dumps(value)}")
        return "\n".join(lines)
