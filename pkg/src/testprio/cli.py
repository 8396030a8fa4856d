"""Command-line pipeline: files -> fit -> score -> rank -> evaluate -> report.

Subcommands: fit, prioritize, evaluate, stats. A single JSON config
describes the dataset files, the approach matrix, selection fractions and
seeds; every resolved default is written back to the output directory.
Exit codes: 0 success, 2 config error, 3 data error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import coverage as cov
from . import surprise as sa
from . import uncertainty as unc
from .core import (ConfigError, DataError, StochasticPredictionStack,
                   load_matrix, write_text_atomic)
from .evaluate import apfd, export_stats_csv, pairwise_stats, select_active
from .prioritize import (Ranking, cam_order, ctm_order, export_ranking_csv,
                         load_ranking_csv, score_order)

CONFIG_DEFAULTS = {
    "selection_fractions": [0.2],
    "seeds": [0],
    "surprise_buckets": 1000,
    "batch_size": 256,
    "threads": 1,
    "output_dir": "out",
}

_UNCERTAINTY_FNS = {
    "deepgini": unc.deepgini,
    "vanilla_softmax": unc.vanilla_softmax,
    "pcs": unc.pcs,
    "entropy": unc.entropy,
}

_SA_FIELDS = ("per_class", "min_variance_threshold", "max_features",
              "dsa_subsample_fraction", "dsa_batch_size", "dsa_threads",
              "mlsa_components", "mmdsa_clusters", "epsilon_scale")


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    config = dict(CONFIG_DEFAULTS)
    config.update(raw)
    _validate_config(config)
    return config


def _validate_config(config: dict) -> None:
    data = config.get("data")
    if not isinstance(data, dict):
        raise ConfigError("config requires a 'data' section")
    approaches = config.get("approaches")
    if not approaches:
        raise ConfigError("config requires a nonempty 'approaches' list")
    names = set()
    for app in approaches:
        name = app.get("name")
        if not name:
            raise ConfigError("every approach needs a 'name'")
        if name in names:
            raise ConfigError(f"duplicate approach name {name!r}")
        names.add(name)
        family = app.get("family")
        if family == "coverage":
            try:
                cov.NCConfig(app.get("method", ""), app.get("k", 0))
            except DataError as exc:
                raise ConfigError(f"{name}: {exc}") from exc
            if app.get("order", "ctm") not in ("ctm", "cam"):
                raise ConfigError(f"{name}: order must be ctm or cam")
        elif family == "surprise":
            _sa_config(app, seed=0)
            if app.get("order", "score") not in ("score", "cam"):
                raise ConfigError(f"{name}: order must be score or cam")
        elif family == "uncertainty":
            metric = app.get("metric")
            if metric not in _UNCERTAINTY_FNS and metric != "mc_dropout":
                raise ConfigError(f"{name}: unknown metric {metric!r}")
            if metric == "mc_dropout" and not data.get("stochastic_stack"):
                raise ConfigError(f"{name}: mc_dropout needs a stochastic stack")
        else:
            raise ConfigError(f"{name}: unknown family {family!r}")
    for fraction in config["selection_fractions"]:
        if not 0 < fraction <= 1:
            raise ConfigError(f"selection fraction {fraction} outside (0, 1]")
    if not config["seeds"]:
        raise ConfigError("at least one seed required")


def _sa_config(app: dict, seed: int, threads: int | None = None) -> sa.SAConfig:
    kwargs = {f: app[f] for f in _SA_FIELDS if f in app}
    if threads is not None:
        kwargs["dsa_threads"] = threads
    try:
        return sa.SAConfig(variant=app.get("variant", ""), seed=seed, **kwargs)
    except (DataError, TypeError) as exc:
        raise ConfigError(f"{app.get('name')}: {exc}") from exc


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", name)


def _write_resolved(config: dict, out: Path) -> None:
    write_text_atomic(out / "config.resolved.json",
                      json.dumps(config, indent=2, sort_keys=True) + "\n")


class _Data:
    """Lazily loaded dataset files shared across approaches."""

    def __init__(self, config: dict):
        self.paths = config["data"]
        self._cache = {}

    def _get(self, key, kind):
        if key not in self._cache:
            path = self.paths.get(key)
            if not path:
                raise ConfigError(f"config data section is missing {key!r}")
            self._cache[key] = load_matrix(path, kind)
        return self._cache[key]

    @property
    def train_activations(self):
        return self._get("train_activations", "activations")

    @property
    def train_labels(self):
        return self._get("train_labels", "labels")

    @property
    def test_activations(self):
        return self._get("test_activations", "activations")

    @property
    def test_softmax(self):
        return self._get("test_softmax", "softmax")

    @property
    def test_labels(self):
        return self._get("test_labels", "labels")

    @property
    def predicted_labels(self):
        from .core import argmax_predictions
        return argmax_predictions(self.test_softmax)

    @property
    def stochastic_stack(self):
        if "stochastic_stack" not in self._cache:
            path = self.paths.get("stochastic_stack")
            if not path:
                raise ConfigError("config data section is missing "
                                  "'stochastic_stack'")
            arr = np.load(path, allow_pickle=False)
            self._cache["stochastic_stack"] = StochasticPredictionStack(arr)
        return self._cache["stochastic_stack"]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_fit(config: dict, out: Path, threads: int) -> None:
    data = _Data(config)
    _write_resolved(config, out)
    if any(a["family"] == "coverage" for a in config["approaches"]):
        stats = cov.fit_neuron_stats(data.train_activations)
        models = out / "models"
        models.mkdir(parents=True, exist_ok=True)
        with open(models / "neuron_stats.npz", "wb") as fh:
            np.savez(fh, minimum=stats.minimum, maximum=stats.maximum,
                     std=stats.std)
    for seed in config["seeds"]:
        seed_dir = out / f"seed_{seed}" / "models"
        for app in config["approaches"]:
            if app["family"] != "surprise":
                continue
            try:
                cfg = _sa_config(app, seed=seed, threads=threads)
                model = sa.fit_sa(data.train_activations, data.train_labels, cfg)
            except DataError as exc:
                raise DataError(f"{app['name']}: {exc}") from exc
            sa.save_sa_model(seed_dir / f"sa_{_slug(app['name'])}.bin", model)


def _load_neuron_stats(out: Path) -> cov.NeuronStats:
    path = out / "models" / "neuron_stats.npz"
    if not path.exists():
        raise DataError(f"missing fitted neuron stats: {path} (run fit first)")
    with np.load(path) as npz:
        return cov.NeuronStats(npz["minimum"], npz["maximum"], npz["std"])


def _rank_approach(app: dict, data: _Data, config: dict, out: Path,
                   seed: int, threads: int) -> Ranking:
    family = app["family"]
    if family == "uncertainty":
        metric = app["metric"]
        if metric == "mc_dropout":
            scores = unc.mc_dropout_variation_ratio(data.stochastic_stack)
        else:
            scores = _UNCERTAINTY_FNS[metric](data.test_softmax)
        return score_order(scores)
    if family == "coverage":
        stats = _load_neuron_stats(out)
        cfg = cov.NCConfig(app["method"], app["k"], config["batch_size"])
        profile = cov.stream_profiles(
            cov.iter_batches(data.test_activations, cfg.batch_size), stats, cfg)
        return cam_order(profile) if app.get("order", "ctm") == "cam" \
            else ctm_order(profile)
    # surprise
    model_path = out / f"seed_{seed}" / "models" / f"sa_{_slug(app['name'])}.bin"
    if not model_path.exists():
        raise DataError(f"missing fitted model: {model_path} (run fit first)")
    model = sa.load_sa_model(model_path)
    cfg = model.config
    if cfg.variant == "DSA" and not cfg.per_class:
        scores = sa.dsa_batched(model, data.test_activations,
                                data.predicted_labels,
                                cfg.dsa_batch_size, threads)
    else:
        scores = sa.sa_score(model, data.test_activations,
                             data.predicted_labels)
    if app.get("order", "score") == "cam":
        profile = sa.surprise_profile(scores, config["surprise_buckets"])
        return cam_order(profile)
    return score_order(scores.scores)


def cmd_prioritize(config: dict, out: Path, threads: int) -> None:
    data = _Data(config)
    _write_resolved(config, out)
    for seed in config["seeds"]:
        seed_dir = out / f"seed_{seed}"
        timings = []
        for app in config["approaches"]:
            try:
                start = time.perf_counter()
                ranking = _rank_approach(app, data, config, out, seed, threads)
                elapsed = time.perf_counter() - start
            except DataError as exc:
                raise DataError(f"{app['name']}: {exc}") from exc
            export_ranking_csv(seed_dir / f"ranking_{_slug(app['name'])}.csv",
                               ranking)
            timings.append((app["name"], elapsed))
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(["approach", "seconds"])
        for name, seconds in timings:
            writer.writerow([name, repr(seconds)])
        write_text_atomic(seed_dir / "timings.csv", buf.getvalue())


def cmd_evaluate(config: dict, out: Path) -> None:
    data = _Data(config)
    _write_resolved(config, out)
    misclassified = data.predicted_labels != data.test_labels
    apfd_rows = []
    per_approach = {app["name"]: [] for app in config["approaches"]}
    for seed in config["seeds"]:
        seed_dir = out / f"seed_{seed}"
        for app in config["approaches"]:
            path = seed_dir / f"ranking_{_slug(app['name'])}.csv"
            if not path.exists():
                raise DataError(f"missing ranking: {path} (run prioritize first)")
            ranking = load_ranking_csv(path)
            if misclassified.any():
                result = apfd(ranking, misclassified)
                apfd_rows.append((app["name"], seed, repr(result.apfd),
                                  result.n_tests, result.n_faults))
                per_approach[app["name"]].append(result.apfd)
            else:
                apfd_rows.append((app["name"], seed, "n/a",
                                  len(ranking), 0))
            for fraction in config["selection_fractions"]:
                selected = select_active(ranking, fraction)
                buf = io.StringIO()
                writer = csv.writer(buf, lineterminator="\r\n")
                writer.writerow(["test_index"])
                for idx in selected:
                    writer.writerow([int(idx)])
                tag = f"{fraction:g}".replace(".", "p")
                write_text_atomic(
                    seed_dir / f"selected_{_slug(app['name'])}_{tag}.csv",
                    buf.getvalue())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["approach", "seed", "apfd", "n_tests", "n_faults"])
    writer.writerows(apfd_rows)
    write_text_atomic(out / "apfd.csv", buf.getvalue())
    if len(config["seeds"]) >= 2 and misclassified.any():
        export_stats_csv(out / "stats.csv", pairwise_stats(per_approach))


def cmd_stats(config: dict, out: Path) -> None:
    table = out / "apfd.csv"
    if not table.exists():
        raise DataError(f"missing APFD table: {table} (run evaluate first)")
    per_approach = {}
    with open(table, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["apfd"] == "n/a":
                continue
            per_approach.setdefault(row["approach"], []).append(float(row["apfd"]))
    if len(per_approach) < 2:
        raise DataError("need at least two approaches with APFDs for stats")
    export_stats_csv(out / "stats.csv", pairwise_stats(per_approach))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="testprio",
        description="Rank DNN test inputs and evaluate prioritization quality.")
    parser.add_argument("command", choices=["fit", "prioritize", "evaluate",
                                            "stats"])
    parser.add_argument("--config", required=True, metavar="PATH")
    parser.add_argument("--out", metavar="DIR",
                        help="output directory (default: config output_dir)")
    parser.add_argument("--seed", type=int, metavar="N",
                        help="override the config seed list with one seed")
    parser.add_argument("--threads", type=int, default=None, metavar="N")
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config["seeds"] = [args.seed]
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            config["threads"] = args.threads
        threads = config["threads"]
        out = Path(args.out) if args.out else Path(config["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "fit":
            cmd_fit(config, out, threads)
        elif args.command == "prioritize":
            cmd_prioritize(config, out, threads)
        elif args.command == "evaluate":
            cmd_evaluate(config, out)
        else:
            cmd_stats(config, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
