import csv
import json

import numpy as np
import pytest

from natlangevin import cli
from natlangevin.data import IMAGE_MAGIC, LABEL_MAGIC, write_idx


@pytest.fixture(scope="module")
def idx_dir(tmp_path_factory):
    """Tiny separable 'MNIST': 4x4 images whose bright quadrant is the label."""
    root = tmp_path_factory.mktemp("idx")
    rng = np.random.default_rng(0)
    for split, n in (("train", 600), ("t10k", 200)):
        labels = rng.integers(0, 4, n).astype(np.uint8)
        images = rng.integers(0, 60, (n, 4, 4)).astype(np.uint8)
        for k, lab in enumerate(labels):
            r, c = divmod(int(lab), 2)
            images[k, 2 * r : 2 * r + 2, 2 * c : 2 * c + 2] = 255
        write_idx(root / f"{split}-images-idx3-ubyte", images, IMAGE_MAGIC)
        write_idx(root / f"{split}-labels-idx1-ubyte", labels, LABEL_MAGIC)
    return root


def small_cfg(idx_dir, tmp_path, **kw):
    base = dict(data_dir=str(idx_dir), hidden=[8], val_size=100, train_eval_size=None, updates=60, burn_in=10,
                thin=10, eval_every=20, batch_size=20, output_dir=str(tmp_path / "out"))
    base.update(kw)
    return cli.from_dict(base)


def test_defaults(tmp_path, idx_dir):
    (tmp_path / "c.json").write_text(json.dumps({"data_dir": str(idx_dir)}))
    cfg = cli.parse_config(tmp_path / "c.json")
    assert (cfg.batch_size, cfg.eps, cfg.gamma, cfg.halve_every) == (100, 1e-4, "inv_sqrt", 10_000)
    assert (cfg.hidden, cfg.updates, cfg.burn_in, cfg.thin) == ([400, 400], 50_000, 500, 100)
    assert cfg.etas_for("identity") == [0.001, 0.01, 0.1, 1.0]
    assert cfg.etas_for("qdop") == [0.0001, 0.001, 0.01, 0.1]
    assert cfg.prior_var_grid == [0.01, 0.1, 1.0]


@pytest.mark.parametrize("raw,key", [
    ({"eps": -1}, "eps"), ({"bogus": 1}, "bogus"), ({"preconditioner": "adam"}, "preconditioner"),
    ({"train_images": "/nonexistent/file"}, "train_images"), ({"thin": 0}, "thin"), ({"gamma": 2.0}, "gamma"),
    ({"hidden": [0]}, "hidden"),
])
def test_rejections_name_the_key(raw, key):
    with pytest.raises(cli.ConfigError) as info:
        cli.from_dict(raw)
    assert info.value.key == key


def test_missing_dataset_path(tmp_path):
    cfg = cli.from_dict({"output_dir": str(tmp_path)})
    with pytest.raises(cli.ConfigError) as info:
        cli.load_datasets(cfg)
    assert info.value.key == "train_images"


def test_echo_round_trip(tmp_path, idx_dir):
    cfg = small_cfg(idx_dir, tmp_path, gamma=0.3, eta_grid=[0.5, 0.05])
    path = cli.echo_config(cfg, tmp_path / "echo")
    assert cli.parse_config(path) == cfg


def read(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_zero_update_grid_reports_initial_metrics(tmp_path, idx_dir):
    cfg = small_cfg(idx_dir, tmp_path, updates=0, preconditioners=["identity"], eta_grid=[0.1], prior_var_grid=[1.0])
    records, selected = cli.run_grid(cfg, workers=1)
    rows = read(tmp_path / "out" / "results.csv")
    assert [r["mode"] for r in rows] == ["ensemble", "post_mean"]
    assert rows[0]["members"] == "1" and rows[0]["status"] == "ok"
    # both evaluation modes see the initial parameters
    assert rows[0]["nll_test"] == rows[1]["nll_test"]
    assert list(rows[0]) == list(cli.RESULT_COLUMNS) + ["cell"]


def test_grid_is_bitwise_reproducible_and_parallel_safe(tmp_path, idx_dir):
    outs = []
    for name, workers in (("a", 1), ("b", 2)):
        cfg = small_cfg(idx_dir, tmp_path, preconditioners=["identity", "qdop"], eta_grid=[0.05, 0.5],
                        prior_var_grid=[1.0], output_dir=str(tmp_path / name))
        cli.run_grid(cfg, workers=workers)
        outs.append(tmp_path / name)
    for fname in ("results.csv", "cells.csv", "summary.json"):
        a = (outs[0] / fname).read_text().replace(str(outs[0]), "")
        b = (outs[1] / fname).read_text().replace(str(outs[1]), "")
        assert a == b, fname
    cells = sorted(p.name for p in (outs[0] / "cells").iterdir())
    assert len(cells) == 4
    for c in cells:
        assert (outs[0] / "cells" / c / "metrics.csv").read_bytes() == (outs[1] / "cells" / c / "metrics.csv").read_bytes()
    summary = json.loads((outs[0] / "summary.json").read_text())
    assert summary["schema"] == cli.SUMMARY_SCHEMA
    assert {"config", "selected", "cells", "command", "version"} <= set(summary)


def test_selection_by_validation_accuracy(tmp_path, idx_dir):
    cfg = small_cfg(idx_dir, tmp_path, preconditioners=["identity"], eta_grid=[1e-6, 0.5], prior_var_grid=[1.0])
    records, selected = cli.run_grid(cfg, workers=1)
    ens = [r for r in selected if r["mode"] == "ensemble"][0]
    best = max(records, key=lambda r: r["ensemble_val"]["accuracy"])
    assert ens["cell"] == best["cell"] and ens["eta0"] == 0.5


def test_divergent_cell_recorded(tmp_path, idx_dir):
    cfg = small_cfg(idx_dir, tmp_path, preconditioners=["identity"], eta_grid=[1e6, 0.1], prior_var_grid=[1.0])
    records, selected = cli.run_grid(cfg, workers=1)
    assert records[0]["status"].startswith("diverged") and records[1]["status"] == "ok"
    assert selected[0]["eta0"] == 0.1


def test_train_eval_and_exit_codes(tmp_path, idx_dir, capsys):
    args = ["train", "--data-dir", str(idx_dir), "--hidden", "8", "--val-size", "100", "--updates", "60",
            "--burn-in", "10", "--thin", "10", "--batch-size", "20", "--eval-every", "20",
            "--eta0", "0.05", "--preconditioner", "dop", "--output-dir", str(tmp_path / "t")]
    assert cli.main(args) == cli.EXIT_OK
    out = tmp_path / "t"
    for name in ("config.json", "metrics.csv", "results.csv", "summary.json", "timing.json", "theta_mean.lbnn"):
        assert (out / name).exists(), name
    assert read(out / "metrics.csv")[0].keys() == set(cli.TRACE_COLUMNS)
    assert cli.main(["eval", "--config", str(out / "config.json"), str(out / "theta_mean.lbnn")]) == cli.EXIT_OK
    assert "test" in capsys.readouterr().out
    assert cli.main(args[:-2] + ["--eps", "-1", "--output-dir", str(tmp_path / "x")]) == cli.EXIT_CONFIG
    assert cli.main(args[:-2] + ["--eta0", "1e7", "--output-dir", str(tmp_path / "d")]) == cli.EXIT_DIVERGED


def test_oracle_table(tmp_path):
    cfg = cli.from_dict({"oracle_steps": 20_000, "oracle_burn_in": 2000, "oracle_kinds": ["identity", "qdop"],
                         "output_dir": str(tmp_path)})
    rows = cli.run_oracle(cfg)
    assert len(rows) == 4
    assert all(abs(r["z"]) < 5 and abs(r["var_rel_err"]) < 0.3 for r in rows)
    assert read(tmp_path / "oracle.csv")[0].keys() == set(cli.ORACLE_COLUMNS)


def test_worker_env(monkeypatch):
    monkeypatch.setenv(cli.WORKERS_ENV, "3")
    assert cli.worker_count() == 3
    monkeypatch.setenv(cli.WORKERS_ENV, "zero")
    with pytest.raises(cli.ConfigError):
        cli.worker_count()
