"""End-to-end pipeline tests for the command-line interface."""
import csv
import json

import numpy as np
import pytest

from testprio.cli import main


@pytest.fixture
def dataset(tmp_path):
    rng = np.random.default_rng(100)
    n_train, n_test, a, c = 120, 60, 8, 3
    train = rng.standard_normal((n_train, a))
    train_labels = rng.integers(0, c, n_train)
    test = rng.standard_normal((n_test, a)) * 1.5
    raw = rng.random((n_test, c)) + 1e-9
    softmax = raw / raw.sum(axis=1, keepdims=True)
    test_labels = rng.integers(0, c, n_test)
    stack = rng.random((5, n_test, c)) + 1e-9
    stack = stack / stack.sum(axis=2, keepdims=True)

    data_dir = tmp_path / "data"
    data_dir.mkdir()
    np.save(data_dir / "train_acts.npy", train)
    np.save(data_dir / "train_labels.npy", train_labels)
    np.save(data_dir / "test_acts.npy", test)
    np.save(data_dir / "test_softmax.npy", softmax)
    np.save(data_dir / "test_labels.npy", test_labels)
    np.save(data_dir / "stack.npy", stack)
    return data_dir


def write_config(tmp_path, dataset, seeds=(0, 1)):
    config = {
        "data": {
            "train_activations": str(dataset / "train_acts.npy"),
            "train_labels": str(dataset / "train_labels.npy"),
            "test_activations": str(dataset / "test_acts.npy"),
            "test_softmax": str(dataset / "test_softmax.npy"),
            "test_labels": str(dataset / "test_labels.npy"),
            "stochastic_stack": str(dataset / "stack.npy"),
        },
        "approaches": [
            {"name": "NAC-0.75", "family": "coverage", "method": "NAC",
             "k": 0.75, "order": "ctm"},
            {"name": "NAC-0.75-CAM", "family": "coverage", "method": "NAC",
             "k": 0.75, "order": "cam"},
            {"name": "KMNC-2", "family": "coverage", "method": "KMNC",
             "k": 2, "order": "ctm"},
            {"name": "DSA", "family": "surprise", "variant": "DSA",
             "order": "score", "dsa_subsample_fraction": 0.5},
            {"name": "PC-MDSA-CAM", "family": "surprise", "variant": "MDSA",
             "per_class": False, "order": "cam"},
            {"name": "DeepGini", "family": "uncertainty", "metric": "deepgini"},
            {"name": "MC-Dropout", "family": "uncertainty",
             "metric": "mc_dropout"},
        ],
        "selection_fractions": [0.2],
        "seeds": list(seeds),
        "surprise_buckets": 50,
        "output_dir": str(tmp_path / "out"),
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path, config


def run(cmd, config_path, out=None, **flags):
    argv = [cmd, "--config", str(config_path)]
    if out:
        argv += ["--out", str(out)]
    for key, value in flags.items():
        argv += [f"--{key}", str(value)]
    return main(argv)


class TestPipeline:
    def test_fit_prioritize_evaluate(self, tmp_path, dataset):
        config_path, config = write_config(tmp_path, dataset)
        out = tmp_path / "out"
        assert run("fit", config_path) == 0
        assert (out / "models" / "neuron_stats.npz").exists()
        assert (out / "seed_0" / "models" / "sa_DSA.bin").exists()
        assert (out / "config.resolved.json").exists()

        assert run("prioritize", config_path) == 0
        for seed in (0, 1):
            seed_dir = out / f"seed_{seed}"
            with open(seed_dir / "ranking_DeepGini.csv", newline="") as fh:
                rows = list(csv.DictReader(fh))
            assert len(rows) == 60
            with open(seed_dir / "timings.csv", newline="") as fh:
                timing_rows = list(csv.DictReader(fh))
            assert [r["approach"] for r in timing_rows] == \
                [a["name"] for a in config["approaches"]]

        assert run("evaluate", config_path) == 0
        with open(out / "apfd.csv", newline="") as fh:
            apfd_rows = list(csv.DictReader(fh))
        assert len(apfd_rows) == 7 * 2  # approaches x seeds
        with open(out / "seed_0" / "selected_DeepGini_0p2.csv", newline="") as fh:
            selected = list(csv.DictReader(fh))
        assert len(selected) == 12  # ceil(0.2 * 60)
        with open(out / "stats.csv", newline="") as fh:
            stats_rows = list(csv.DictReader(fh))
        assert len(stats_rows) == 21  # C(7, 2)

        assert run("stats", config_path) == 0

    def test_two_seeds_two_approaches_single_stats_row(self, tmp_path, dataset):
        config_path, config = write_config(tmp_path, dataset)
        config["approaches"] = config["approaches"][:2]
        config_path.write_text(json.dumps(config))
        out = tmp_path / "out"
        for cmd in ("fit", "prioritize", "evaluate"):
            assert run(cmd, config_path) == 0
        with open(out / "stats.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        # Bonferroni factor 1 for a single pair
        assert float(rows[0]["p_bonferroni"]) == float(rows[0]["p"])


class TestDeterminism:
    def test_rerun_and_thread_count_byte_identical(self, tmp_path, dataset):
        config_path, _ = write_config(tmp_path, dataset, seeds=(0,))
        outputs = {}
        for label, threads in (("t1", 1), ("t4", 4), ("t1b", 1)):
            out = tmp_path / f"out_{label}"
            assert run("fit", config_path, out=out, threads=threads) == 0
            assert run("prioritize", config_path, out=out,
                       threads=threads) == 0
            assert run("evaluate", config_path, out=out) == 0
            blobs = {}
            for path in sorted(out.rglob("*.csv")):
                if path.name == "timings.csv":
                    continue
                blobs[str(path.relative_to(out))] = path.read_bytes()
            outputs[label] = blobs
        assert outputs["t1"] == outputs["t4"]
        assert outputs["t1"] == outputs["t1b"]

    def test_model_files_byte_identical_across_reruns(self, tmp_path, dataset):
        config_path, _ = write_config(tmp_path, dataset, seeds=(0,))
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert run("fit", config_path, out=out_a) == 0
        assert run("fit", config_path, out=out_b) == 0
        blob_a = (out_a / "seed_0" / "models" / "sa_DSA.bin").read_bytes()
        blob_b = (out_b / "seed_0" / "models" / "sa_DSA.bin").read_bytes()
        assert blob_a == blob_b


class TestErrorHandling:
    def test_missing_config_exit_2(self, tmp_path):
        assert run("fit", tmp_path / "nope.json") == 2

    def test_invalid_approach_exit_2(self, tmp_path, dataset):
        config_path, config = write_config(tmp_path, dataset)
        config["approaches"][0]["method"] = "BOGUS"
        config_path.write_text(json.dumps(config))
        assert run("fit", config_path) == 2

    def test_missing_data_file_exit_3(self, tmp_path, dataset):
        config_path, config = write_config(tmp_path, dataset)
        config["data"]["train_activations"] = str(dataset / "missing.npy")
        config_path.write_text(json.dumps(config))
        assert run("fit", config_path) == 3

    def test_prioritize_without_fit_exit_3(self, tmp_path, dataset):
        config_path, _ = write_config(tmp_path, dataset)
        assert run("prioritize", config_path) == 3
