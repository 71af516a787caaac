import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from exprscale.cli import main
from exprscale.corpus import RAW, ExpressionMatrix
from exprscale.model import ModelConfig, param_count
from exprscale.scaling import ScalingPoint, save_points_csv
from exprscale.xmat import load_matrix, save_matrix


def _synth_corpus(tmp_path, name="corpus.xmat", cells=220, genes=16):
    path = tmp_path / name
    rc = main(["data", "--synth", "--cells", str(cells), "--genes", str(genes),
               "--latent-rank", "4", "--noise-sigma", "0.4", "--seed", "1",
               "-o", str(path)])
    assert rc == 0
    return path


def _exact_csv(tmp_path, a=2.0, alpha=0.5, c=1.0):
    xs = np.logspace(1, 4, 6)
    points = [ScalingPoint(x=float(x), loss=a * float(x) ** (-alpha) + c)
              for x in xs]
    path = tmp_path / "points.csv"
    save_points_csv(points, path)
    return path


# ---------------------------------------------------------------------- data

def test_data_synth_deterministic(tmp_path):
    a = _synth_corpus(tmp_path, "a.xmat")
    b = _synth_corpus(tmp_path, "b.xmat")
    assert a.read_bytes() == b.read_bytes()
    assert (a.with_name(a.name + ".json").read_text()
            == b.with_name(b.name + ".json").read_text())


def test_data_split_fractions_in_sidecar(tmp_path):
    path = _synth_corpus(tmp_path, cells=1000)
    side = json.loads(path.with_name(path.name + ".json").read_text())
    tags = side["split"]["tags"]
    assert tags.count("train") == 900
    assert tags.count("val") == 50
    assert tags.count("test") == 50
    assert side["split"]["seed"] == 42


def test_data_build_pipeline_from_raw(tmp_path):
    rng = np.random.default_rng(0)
    raw = ExpressionMatrix(values=rng.poisson(4.0, size=(300, 40)).astype(np.float32),
                           gene_names=[f"g{i}" for i in range(40)], stage=RAW)
    raw_path = tmp_path / "raw.xmat"
    save_matrix(raw, raw_path)
    out = tmp_path / "built.xmat"
    rc = main(["data", "--input", str(raw_path), "--hvg", "20", "-o", str(out)])
    assert rc == 0
    built = load_matrix(out)
    assert built.n_genes == 20
    assert built.stage == "normalized_log1p"
    assert built.split is not None


def test_data_hvg_too_large_exits_data_error(tmp_path, capsys):
    rng = np.random.default_rng(1)
    raw = ExpressionMatrix(values=rng.poisson(2.0, size=(50, 8)).astype(np.float32),
                           gene_names=[f"g{i}" for i in range(8)], stage=RAW)
    raw_path = tmp_path / "raw.xmat"
    save_matrix(raw, raw_path)
    rc = main(["data", "--input", str(raw_path), "--hvg", "99",
               "-o", str(tmp_path / "x.xmat")])
    assert rc == 3
    assert "exceeds" in capsys.readouterr().err


def test_data_missing_inputs_usage_error(tmp_path, capsys):
    rc = main(["data", "-o", str(tmp_path / "x.xmat")])
    assert rc == 2


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("EXPRSCALE_OUT", str(tmp_path))
    rc = main(["data", "--synth", "--cells", "60", "--genes", "16",
               "--latent-rank", "4", "--seed", "1", "-o", "sub/c.xmat"])
    assert rc == 0
    assert (tmp_path / "sub" / "c.xmat").exists()


# --------------------------------------------------------------------- train

def test_train_writes_run_dir(tmp_path):
    corpus = _synth_corpus(tmp_path)
    run = tmp_path / "run"
    rc = main(["train", "--corpus", str(corpus), "--steps", "4",
               "--preset", "custom", "--dim", "8", "--layers", "1",
               "--heads", "2", "--ffn-mult", "2",
               "--physical-batch", "4", "--grad-accum", "1",
               "--eval-every", "2", "-o", str(run)])
    assert rc == 0
    assert (run / "history.jsonl").exists()
    assert (run / "ckpt_best").exists()
    meta = json.loads((run / "metadata.json").read_text())
    assert meta["train"]["physical_batch"] == 4


def test_train_config_file_and_flag_precedence(tmp_path):
    corpus = _synth_corpus(tmp_path)
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("[train]\nphysical_batch = 2\ngrad_accum = 2\n")
    run = tmp_path / "run_cfg"
    rc = main(["train", "--corpus", str(corpus), "--steps", "2",
               "--preset", "custom", "--dim", "4", "--layers", "1",
               "--heads", "2", "--ffn-mult", "1",
               "--config", str(cfg), "--grad-accum", "1",
               "--eval-every", "1", "-o", str(run)])
    assert rc == 0
    meta = json.loads((run / "metadata.json").read_text())
    assert meta["train"]["physical_batch"] == 2  # from config file
    assert meta["train"]["grad_accum"] == 1      # flag wins over file


# --------------------------------------------------------------------- sweep

def test_sweep_runs_index_and_idempotence(tmp_path, capsys):
    corpus = _synth_corpus(tmp_path)
    sweep = tmp_path / "sweep"
    argv = ["sweep", "--corpus", str(corpus), "--presets", "XXS,TINY",
            "--seeds", "7", "--steps", "3", "--physical-batch", "4",
            "--grad-accum", "1", "--eval-every", "3", "-o", str(sweep)]
    assert main(argv) == 0
    capsys.readouterr()

    run_dirs = sorted(p.name for p in sweep.iterdir() if p.is_dir())
    assert run_dirs == ["TINY_seed7", "XXS_seed7"]
    index = (sweep / "index.csv").read_text().splitlines()
    assert index[0] == "tag,x,loss"
    assert len(index) == 3  # header + one point per (preset, seed)

    # P values in the index match the parameter accounting
    rows = {line.split(",")[0]: float(line.split(",")[1]) for line in index[1:]}
    assert rows["XXS-seed7"] == param_count(ModelConfig.from_preset("XXS", 16))
    assert rows["TINY-seed7"] == param_count(ModelConfig.from_preset("TINY", 16))

    # idempotent: completed runs are skipped, files untouched
    mtime = (sweep / "XXS_seed7" / "metadata.json").stat().st_mtime_ns
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "skipped 2 completed run(s)" in out
    assert (sweep / "XXS_seed7" / "metadata.json").stat().st_mtime_ns == mtime


# ----------------------------------------------------------------------- fit

def test_fit_exact_points_and_plot(tmp_path):
    csv_path = _exact_csv(tmp_path)
    out = tmp_path / "fit.json"
    svg = tmp_path / "fit.svg"
    rc = main(["fit", "--points", str(csv_path), "-o", str(out),
               "--plot", str(svg)])
    assert rc == 0
    fit = json.loads(out.read_text())
    assert abs(fit["alpha"] - 0.5) < 1e-3
    assert abs(fit["c"] - 1.0) < 1e-3

    # the plot is well-formed SVG markup
    root = ET.parse(svg).getroot()
    assert root.tag.endswith("svg")


def test_fit_flat_points_warns(tmp_path, capsys):
    rng = np.random.default_rng(5)
    xs = np.logspace(3, 8, 27)
    points = [ScalingPoint(x=float(x), loss=float(1.2 * math.exp(z)))
              for x, z in zip(xs, rng.normal(0, 0.001, len(xs)))]
    path = tmp_path / "flat.csv"
    save_points_csv(points, path)
    rc = main(["fit", "--points", str(path), "-o", str(tmp_path / "f.json")])
    assert rc == 0
    assert "no scaling regime" in capsys.readouterr().err
    fit = json.loads((tmp_path / "f.json").read_text())
    assert abs(fit["alpha"]) < 0.02


def test_fit_degenerate_exits_numeric(tmp_path, capsys):
    points = [ScalingPoint(x=float(10 ** i), loss=1.5) for i in range(1, 5)]
    path = tmp_path / "deg.csv"
    save_points_csv(points, path)
    rc = main(["fit", "--points", str(path), "-o", str(tmp_path / "f.json")])
    assert rc == 4


def test_fit_byte_identical_json(tmp_path):
    csv_path = _exact_csv(tmp_path)
    out_a, out_b = tmp_path / "a.json", tmp_path / "b.json"
    svg_a, svg_b = tmp_path / "a.svg", tmp_path / "b.svg"
    main(["fit", "--points", str(csv_path), "-o", str(out_a), "--plot", str(svg_a)])
    main(["fit", "--points", str(csv_path), "-o", str(out_b), "--plot", str(svg_b)])
    assert out_a.read_bytes() == out_b.read_bytes()
    assert svg_a.read_bytes() == svg_b.read_bytes()


# ------------------------------------------------------------------- entropy

def test_entropy_from_fit_json(tmp_path, capsys):
    fit = {"alpha": 0.266, "a": 2.153, "c": 1.444, "r2": 0.858,
           "n": 18, "c_grid_points": 1000}
    fit_path = tmp_path / "fit.json"
    fit_path.write_text(json.dumps(fit))
    out = tmp_path / "entropy.json"
    rc = main(["entropy", "--mse-fit", str(fit_path), "-o", str(out)])
    assert rc == 0
    rep = json.loads(out.read_text())
    assert abs(rep["mse_floor"]["bits_per_position"] - 2.312) < 1e-3
    assert rep["nll_floor"] is None


def test_entropy_with_nll_refit(tmp_path):
    # canonical-run analogues: transform-then-refit NLL floor lands near
    # the direct conversion
    a, alpha, c = 2.153, 0.266, 1.444
    sizes = [533.0, 9953.0, 132993.0, 859137.0, 19178497.0, 100510801.0]
    rng = np.random.default_rng(0)
    points = [ScalingPoint(x=s, loss=float(c + a * s ** (-alpha) * math.exp(z)))
              for s in sizes for z in rng.normal(0, 0.01, 3)]
    csv_path = tmp_path / "runs.csv"
    save_points_csv(points, csv_path)

    fit_path = tmp_path / "fit.json"
    assert main(["fit", "--points", str(csv_path), "-o", str(fit_path)]) == 0
    out = tmp_path / "entropy.json"
    rc = main(["entropy", "--mse-fit", str(fit_path), "--points", str(csv_path),
               "-o", str(out)])
    assert rc == 0
    rep = json.loads(out.read_text())
    assert rep["nll_provenance"] == "derived_from_best_mse"
    assert rep["bits_gap"] < 0.05
    assert abs(rep["mse_floor"]["bits_per_position"] - 2.312) < 0.02


def test_entropy_zero_bits_reference(tmp_path):
    fit = {"alpha": 0.3, "a": 1.0, "c": 1.0 / (2 * math.pi * math.e),
           "r2": 0.9, "n": 5, "c_grid_points": 1000}
    fit_path = tmp_path / "fit.json"
    fit_path.write_text(json.dumps(fit))
    out = tmp_path / "e.json"
    assert main(["entropy", "--mse-fit", str(fit_path), "-o", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert abs(rep["mse_floor"]["bits_per_position"]) < 1e-9


# -------------------------------------------------------------------- report

def _fake_sweep(tmp_path):
    sweep = tmp_path / "sweep"
    sweep.mkdir()
    runs = [("XXS", 7, 533, 1.1), ("XXS", 8, 533, 1.2), ("XXS", 9, 533, 1.15),
            ("TINY", 7, 9953, 0.9)]
    points = []
    for preset, seed, p, loss in runs:
        run = sweep / f"{preset}_seed{seed}"
        run.mkdir()
        (run / "metadata.json").write_text(json.dumps({
            "model": {"preset": preset}, "seed": seed,
            "param_count": p, "best_val_mse": loss,
        }))
        points.append(ScalingPoint(x=float(p), loss=loss,
                                   tag=f"{preset}-seed{seed}"))
    save_points_csv(points, sweep / "index.csv")
    return sweep


def test_report_tables_and_files(tmp_path):
    sweep = _fake_sweep(tmp_path)
    out = tmp_path / "report"
    rc = main(["report", "--sweep", str(sweep), "-o", str(out)])
    assert rc == 0
    md = (out / "report.md").read_text()
    assert "1.10–1.20" in md        # min-max range across seeds
    assert "| TINY | 9,953 | 0.90 | 1 |" in md  # single-run cell, one value
    table_rows = [ln for ln in md.splitlines() if ln.startswith("| X") or
                  ln.startswith("| TINY")]
    assert len(table_rows) == 2  # one row per distinct preset
    assert (out / "scaling_mse.svg").exists()
    assert (out / "scaling_nll.svg").exists()
    assert (out / "entropy.json").exists()
    assert (out / "fit_mse.json").exists()

    # report numbers come straight from the index
    fit = json.loads((out / "fit_mse.json").read_text())
    assert fit["n"] == 4
